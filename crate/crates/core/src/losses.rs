//! Training and distillation objectives. Every operation returns the scalar
//! loss together with its analytic gradient with respect to the student-side
//! inputs, so the training loop never needs autodiff.
//!
//! Conventions: feature matrices are row-per-sample; gradients carry the
//! same shape as the input they differentiate. `grad_aux` holds the gradient
//! for a secondary input where one exists (classifier logits for the
//! identity loss inside the task loss, the gallery block for the similarity
//! distribution matching pair loss).

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::spectral::ProjectionBasis;
use crate::Modality;

/// Scalar loss value plus analytic gradients.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_features: Array2<f64>,
    pub grad_aux: Option<Array2<f64>>,
}

/// Mixing weights for the combined distillation objective. Must be
/// nonnegative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub cosine: f64,
    pub pcm: f64,
    pub fr: f64,
}

impl LossWeights {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(task: f64, cosine: f64, pcm: f64, fr: f64) -> Result<Self> {
        let w = Self { task, cosine, pcm, fr };
        w.validate()?;
        Ok(w)
    }

    /// No distillation pressure: the task objective alone.
    pub fn task_only() -> Self {
        Self { task: 1.0, cosine: 0.0, pcm: 0.0, fr: 0.0 }
    }

    /// Plain feature mimicry: task kept at a floor weight, the rest on the
    /// cosine alignment term.
    pub fn cosine_distill() -> Self {
        Self { task: 0.01, cosine: 0.99, pcm: 0.0, fr: 0.0 }
    }

    /// Full objective: low task weight, cosine 0.29, principal-component
    /// mapping and feature-relation terms 0.35 each.
    pub fn full_distill() -> Self {
        Self { task: 0.01, cosine: 0.29, pcm: 0.35, fr: 0.35 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.task, self.cosine, self.pcm, self.fr];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Argument(format!("loss weights must be nonnegative, got {self:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Argument(format!("loss weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::full_distill()
    }
}

/// Hyperparameters of the composite task objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskLossConfig {
    /// Triplet margin.
    pub margin: f64,
    /// Softmax temperature of the similarity distribution.
    pub tau: f64,
    /// Stabilizer added to the target distribution inside the log.
    pub epsilon: f64,
}

impl Default for TaskLossConfig {
    fn default() -> Self {
        Self { margin: 0.3, tau: 0.02, epsilon: 1e-8 }
    }
}

impl TaskLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 || !self.margin.is_finite() {
            return Err(Error::Argument(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Argument(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Argument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Term accounting emitted alongside the total similarity-distribution loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdmStats {
    /// Number of directional terms that contributed.
    pub directional_terms: usize,
    /// True when the batch had no usable cross-modal pair.
    pub degenerate: bool,
}

/// Cross-entropy identity loss over classifier scores.
///
/// `grad_features` is the gradient with respect to the logits.
pub fn id_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<LossResult> {
    let (n, c) = (logits.nrows(), logits.ncols());
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} logit rows", labels.len())));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("logits contain a non-finite value".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Argument(format!("label {bad} out of range for {c} classes")));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, c));
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = row.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + exp_sum.ln();
        value -= (row[y] - lse) / n as f64;
        for j in 0..c {
            let p = (row[j] - lse).exp();
            grad[[i, j]] = (p - f64::from(u8::from(j == y))) / n as f64;
        }
    }
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

/// Batch-hard triplet loss over squared Euclidean distances.
pub fn triplet_loss(features: ArrayView2<f64>, labels: &[usize], margin: f64) -> Result<LossResult> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} feature rows", labels.len())));
    }
    if margin < 0.0 {
        return Err(Error::Argument(format!("margin must be >= 0, got {margin}")));
    }
    let sq_dist = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut value = 0.0;
    let mut grad = Array2::zeros(features.raw_dim());
    for i in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = sq_dist(features.row(i), features.row(j));
            if labels[j] == labels[i] {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (p, d_pos) = hardest_pos
            .ok_or_else(|| Error::Mining(format!("anchor {i} has no positive in the batch")))?;
        let (q, d_neg) = hardest_neg
            .ok_or_else(|| Error::Mining(format!("anchor {i} has no negative in the batch")))?;
        let hinge = d_pos - d_neg + margin;
        if hinge > 0.0 {
            value += hinge / n as f64;
            let scale = 2.0 / n as f64;
            for k in 0..features.ncols() {
                let dp = features[[i, k]] - features[[p, k]];
                let dn = features[[i, k]] - features[[q, k]];
                grad[[i, k]] += scale * (dp - dn);
                grad[[p, k]] -= scale * dp;
                grad[[q, k]] += scale * dn;
            }
        }
    }
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

/// Directional similarity-distribution-matching loss from a query block to a
/// gallery block. `grad_features` is with respect to the queries, `grad_aux`
/// with respect to the gallery.
pub fn sdm_pair_loss(
    queries: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
    cfg: &TaskLossConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    let (nq, ng) = (queries.nrows(), gallery.nrows());
    if queries.ncols() != gallery.ncols() {
        return Err(Error::Argument("query/gallery dimension mismatch".into()));
    }
    if query_labels.len() != nq || gallery_labels.len() != ng {
        return Err(Error::Argument("label lengths do not match feature blocks".into()));
    }
    if nq == 0 || ng == 0 {
        return Err(Error::Argument("query and gallery blocks must be nonempty".into()));
    }
    let q_norms = row_norms(queries, "query")?;
    let g_norms = row_norms(gallery, "gallery")?;

    // Ground-truth match distribution per query.
    let mut q_dist = Array2::zeros((nq, ng));
    for i in 0..nq {
        let matches = gallery_labels.iter().filter(|&&y| y == query_labels[i]).count();
        if matches == 0 {
            return Err(Error::Argument(format!(
                "query row {i} (identity {}) has no match in the gallery block",
                query_labels[i]
            )));
        }
        for j in 0..ng {
            if gallery_labels[j] == query_labels[i] {
                q_dist[[i, j]] = 1.0 / matches as f64;
            }
        }
    }

    let mut value = 0.0;
    let mut grad_q = Array2::zeros(queries.raw_dim());
    let mut grad_g = Array2::zeros(gallery.raw_dim());
    let inv_nq = 1.0 / nq as f64;

    for i in 0..nq {
        let qi = queries.row(i);
        // Scaled similarities and their stable softmax.
        let mut z = Array1::zeros(ng);
        let mut cos = Array1::zeros(ng);
        for j in 0..ng {
            let dot: f64 = qi.iter().zip(gallery.row(j).iter()).map(|(a, b)| a * b).sum();
            cos[j] = dot / (q_norms[i] * g_norms[j]);
            z[j] = cos[j] / cfg.tau;
        }
        let max_z = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max_z + z.iter().map(|&v| (v - max_z).exp()).sum::<f64>().ln();

        // KL-style row terms; p == 0 contributes nothing in value or grad.
        let mut row_kl = 0.0;
        let mut log_ratio = Array1::zeros(ng);
        let mut p = Array1::zeros(ng);
        for j in 0..ng {
            p[j] = (z[j] - lse).exp();
            if p[j] > 0.0 {
                log_ratio[j] = (z[j] - lse) - (q_dist[[i, j]] + cfg.epsilon).ln();
                row_kl += p[j] * log_ratio[j];
            }
        }
        value += inv_nq * row_kl;

        for j in 0..ng {
            if p[j] == 0.0 {
                continue;
            }
            let dl_dcos = inv_nq * p[j] * (log_ratio[j] - row_kl) / cfg.tau;
            if dl_dcos == 0.0 {
                continue;
            }
            let gj = gallery.row(j);
            let inv_qg = 1.0 / (q_norms[i] * g_norms[j]);
            for k in 0..queries.ncols() {
                grad_q[[i, k]] += dl_dcos * (gj[k] * inv_qg - cos[j] * qi[k] / (q_norms[i] * q_norms[i]));
                grad_g[[j, k]] += dl_dcos * (qi[k] * inv_qg - cos[j] * gj[k] / (g_norms[j] * g_norms[j]));
            }
        }
    }
    Ok(LossResult { value, grad_features: grad_q, grad_aux: Some(grad_g) })
}

/// Sum of directional similarity-distribution terms over every modality pair
/// present in the batch with at least one cross-modal identity match. Pair
/// enumeration follows the canonical modality order; each pair contributes
/// both directions.
pub fn sdm_total(
    features: ArrayView2<f64>,
    labels: &[usize],
    modalities: &[Modality],
    cfg: &TaskLossConfig,
) -> Result<(LossResult, SdmStats)> {
    let n = features.nrows();
    if labels.len() != n || modalities.len() != n {
        return Err(Error::Argument("labels/modalities must match feature rows".into()));
    }
    let mut rows_by_modality: BTreeMap<Modality, Vec<usize>> = BTreeMap::new();
    for (row, &m) in modalities.iter().enumerate() {
        rows_by_modality.entry(m).or_default().push(row);
    }

    let mut value = 0.0;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut directional_terms = 0;

    for (ma, mb) in Modality::pairs() {
        let (Some(rows_a), Some(rows_b)) = (rows_by_modality.get(&ma), rows_by_modality.get(&mb))
        else {
            continue;
        };
        for (q_rows, g_rows) in [(rows_a, rows_b), (rows_b, rows_a)] {
            let gallery_ids: Vec<usize> = g_rows.iter().map(|&r| labels[r]).collect();
            let eligible: Vec<usize> = q_rows
                .iter()
                .copied()
                .filter(|&r| gallery_ids.contains(&labels[r]))
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let q_block = gather_rows(features, &eligible);
            let g_block = gather_rows(features, g_rows);
            let q_ids: Vec<usize> = eligible.iter().map(|&r| labels[r]).collect();
            let part = sdm_pair_loss(q_block.view(), g_block.view(), &q_ids, &gallery_ids, cfg)?;
            value += part.value;
            directional_terms += 1;
            for (local, &row) in eligible.iter().enumerate() {
                for k in 0..features.ncols() {
                    grad[[row, k]] += part.grad_features[[local, k]];
                }
            }
            let g_grad = part.grad_aux.expect("pair loss always returns a gallery gradient");
            for (local, &row) in g_rows.iter().enumerate() {
                for k in 0..features.ncols() {
                    grad[[row, k]] += g_grad[[local, k]];
                }
            }
        }
    }

    let degenerate = directional_terms == 0;
    if degenerate {
        warn!("batch has no cross-modal pair with an identity match; SDM term is zero");
    }
    Ok((LossResult { value, grad_features: grad, grad_aux: None }, SdmStats {
        directional_terms,
        degenerate,
    }))
}

/// Composite task objective: identity + triplet + similarity distribution
/// matching, unit weights. `grad_features` accumulates the triplet and SDM
/// gradients; `grad_aux` carries the identity-loss gradient with respect to
/// the logits.
pub fn task_loss(
    features: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    labels: &[usize],
    modalities: &[Modality],
    cfg: &TaskLossConfig,
) -> Result<LossResult> {
    let id = id_loss(logits, labels)?;
    let triplet = triplet_loss(features, labels, cfg.margin)?;
    let (sdm, _) = sdm_total(features, labels, modalities, cfg)?;
    Ok(LossResult {
        value: id.value + triplet.value + sdm.value,
        grad_features: &triplet.grad_features + &sdm.grad_features,
        grad_aux: Some(id.grad_features),
    })
}

/// Mean cosine misalignment between aligned teacher/student rows. The
/// teacher is frozen: the gradient is with respect to the student only.
pub fn cosine_loss(teacher: ArrayView2<f64>, student: ArrayView2<f64>) -> Result<LossResult> {
    if teacher.raw_dim() != student.raw_dim() {
        return Err(Error::Argument(format!(
            "teacher {:?} and student {:?} shapes differ",
            teacher.shape(),
            student.shape()
        )));
    }
    let n = teacher.nrows();
    if n == 0 {
        return Err(Error::Argument("cosine loss over an empty batch".into()));
    }
    let t_norms = row_norms(teacher, "teacher")?;
    let s_norms = row_norms(student, "student")?;
    let mut value = 0.0;
    let mut grad = Array2::zeros(student.raw_dim());
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let t = teacher.row(i);
        let s = student.row(i);
        let dot: f64 = t.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
        let cos = dot / (t_norms[i] * s_norms[i]);
        value += inv_n * (1.0 - cos);
        for k in 0..teacher.ncols() {
            grad[[i, k]] =
                -inv_n * (t[k] / (t_norms[i] * s_norms[i]) - cos * s[k] / (s_norms[i] * s_norms[i]));
        }
    }
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

/// Cosine misalignment after projecting both sides onto a shared principal
/// basis; the gradient chains through the fixed projection.
pub fn pcm_loss(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    basis: &ProjectionBasis,
) -> Result<LossResult> {
    if teacher.ncols() != basis.dim() || student.ncols() != basis.dim() {
        return Err(Error::Argument(format!(
            "basis dimension {} does not match features ({} / {})",
            basis.dim(),
            teacher.ncols(),
            student.ncols()
        )));
    }
    let t_proj = basis.project(teacher);
    let s_proj = basis.project(student);
    for (name, m) in [("teacher", &t_proj), ("student", &s_proj)] {
        if m.rows().into_iter().any(|r| r.iter().map(|v| v * v).sum::<f64>() == 0.0) {
            return Err(Error::Data(format!(
                "{name} row projects to zero norm: features orthogonal to the retained subspace"
            )));
        }
    }
    let projected = cosine_loss(t_proj.view(), s_proj.view())?;
    let grad = projected.grad_features.dot(&basis.matrix().t());
    Ok(LossResult { value: projected.value, grad_features: grad, grad_aux: None })
}

/// Feature-relation loss: cosine misalignment between the d x d batch Gram
/// matrices `F^T F / N` of teacher and student.
///
/// The Gram over the batch dimension makes the value invariant to any
/// orthogonal mixing of one operand's rows, and the cosine comparison makes
/// it invariant to uniform scaling; both Grams are positive semidefinite, so
/// the value lies in [0, 1].
pub fn fr_loss(teacher: ArrayView2<f64>, student: ArrayView2<f64>) -> Result<LossResult> {
    if teacher.raw_dim() != student.raw_dim() {
        return Err(Error::Argument(format!(
            "teacher {:?} and student {:?} shapes differ",
            teacher.shape(),
            student.shape()
        )));
    }
    let n = teacher.nrows();
    if n < 2 {
        return Err(Error::Argument(format!("feature relation needs at least 2 rows, got {n}")));
    }
    row_norms(teacher, "teacher")?;
    row_norms(student, "student")?;
    let inv_n = 1.0 / n as f64;
    let g_t = teacher.t().dot(&teacher) * inv_n;
    let g_s = student.t().dot(&student) * inv_n;

    let dot: f64 = g_t.iter().zip(g_s.iter()).map(|(a, b)| a * b).sum();
    let tn = g_t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sn = g_s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = dot / (tn * sn);
    let value = 1.0 - cos;

    // dL/dG_s, symmetric because both Grams are.
    let m = {
        let mut m = Array2::zeros(g_s.raw_dim());
        for ((i, j), out) in m.indexed_iter_mut() {
            *out = -(g_t[[i, j]] / (tn * sn) - cos * g_s[[i, j]] / (sn * sn));
        }
        m
    };
    let grad = student.dot(&m) * (2.0 * inv_n);
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

/// Weighted combination of the four loss components. Gradients combine
/// linearly; the auxiliary (logits) gradient is scaled by the task weight.
pub fn distill_loss(
    task: &LossResult,
    cosine: &LossResult,
    pcm: &LossResult,
    fr: &LossResult,
    weights: &LossWeights,
) -> Result<LossResult> {
    weights.validate()?;
    let shape = task.grad_features.raw_dim();
    for (name, part) in [("cosine", cosine), ("pcm", pcm), ("fr", fr)] {
        if part.grad_features.raw_dim() != shape {
            return Err(Error::Argument(format!("{name} gradient shape differs from task")));
        }
    }
    let value = weights.task * task.value
        + weights.cosine * cosine.value
        + weights.pcm * pcm.value
        + weights.fr * fr.value;
    let grad_features = &task.grad_features * weights.task
        + &(&cosine.grad_features * weights.cosine)
        + &(&pcm.grad_features * weights.pcm)
        + &(&fr.grad_features * weights.fr);
    let grad_aux = task.grad_aux.as_ref().map(|g| g * weights.task);
    Ok(LossResult { value, grad_features, grad_aux })
}

fn row_norms(m: ArrayView2<f64>, name: &str) -> Result<Vec<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Data(format!("{name} features contain a non-finite value")));
    }
    m.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                Err(Error::Data(format!("{name} row {i} has zero norm")))
            } else {
                Ok(norm)
            }
        })
        .collect()
}

fn gather_rows(m: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}
