//! Retrieval evaluation: Rank-k, mAP, and mINP per cross-modal task, with
//! cloud/edge query-gallery source pairings.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::{EmbeddingSet, Modality};

/// A retrieval task: query one modality against a gallery of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalTask {
    pub query: Modality,
    pub gallery: Modality,
}

impl EvalTask {
    pub fn new(query: Modality, gallery: Modality) -> Result<Self> {
        if query == gallery {
            return Err(Error::Argument(format!(
                "query and gallery modality must differ, both are {query}"
            )));
        }
        Ok(Self { query, gallery })
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.query, self.gallery)
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    /// Parses `"<query>:<gallery>"`, e.g. `"sketch:rgb"`.
    fn from_str(s: &str) -> Result<Self> {
        let (q, g) = s
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("task must be query:gallery, got {s:?}")))?;
        Self::new(q.parse().map_err(arg)?, g.parse().map_err(arg)?)
    }
}

fn arg(e: Error) -> Error {
    Error::Argument(e.to_string())
}

/// Which feature sources provide queries and gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Cloud queries against a cloud gallery.
    C2C,
    /// Edge queries against an edge gallery.
    E2E,
    /// Edge queries against a cloud gallery.
    E2C,
}

impl EvalMode {
    /// Required (query, gallery) source tags.
    pub fn expected_tags(self) -> (&'static str, &'static str) {
        match self {
            EvalMode::C2C => ("cloud", "cloud"),
            EvalMode::E2E => ("edge", "edge"),
            EvalMode::E2C => ("edge", "cloud"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::C2C => "c2c",
            EvalMode::E2E => "e2e",
            EvalMode::E2C => "e2c",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c2c" => Ok(EvalMode::C2C),
            "e2e" => Ok(EvalMode::E2E),
            "e2c" => Ok(EvalMode::E2C),
            other => Err(Error::Argument(format!("unknown mode {other:?}, expected c2c|e2e|e2c"))),
        }
    }
}

/// Aggregated retrieval quality over one task and mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    pub n_queries: usize,
}

/// One gallery to rank against: features plus identity and sample ids.
pub struct GalleryView<'a> {
    pub features: ArrayView2<'a, f64>,
    pub identity_ids: &'a [usize],
    pub sample_ids: &'a [usize],
}

/// Ranks one query against a gallery. Returns (average precision, inverse
/// negative penalty, 1-based rank of the first true match). Gallery order is
/// by descending cosine similarity, ties broken by ascending sample id.
pub fn evaluate_query(
    query: ArrayView1<f64>,
    query_id: usize,
    gallery: &GalleryView,
) -> Result<(f64, f64, usize)> {
    let n = gallery.features.nrows();
    if gallery.identity_ids.len() != n || gallery.sample_ids.len() != n {
        return Err(Error::Argument("gallery metadata does not match feature rows".into()));
    }
    let total_matches = gallery.identity_ids.iter().filter(|&&id| id == query_id).count();
    if total_matches == 0 {
        return Err(Error::Argument(format!("identity {query_id} has no match in the gallery")));
    }
    let q_norm = norm(query);
    let mut ranked: Vec<(f64, usize, usize)> = (0..n)
        .map(|j| {
            let row = gallery.features.row(j);
            let g_norm = norm(row);
            let sim = if q_norm == 0.0 || g_norm == 0.0 {
                0.0
            } else {
                row.iter().zip(query.iter()).map(|(a, b)| a * b).sum::<f64>() / (q_norm * g_norm)
            };
            (sim, gallery.sample_ids[j], j)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut seen_matches = 0;
    let mut precision_sum = 0.0;
    let mut first_rank = 0;
    let mut last_rank = 0;
    for (pos, &(_, _, j)) in ranked.iter().enumerate() {
        if gallery.identity_ids[j] == query_id {
            let rank = pos + 1;
            seen_matches += 1;
            precision_sum += seen_matches as f64 / rank as f64;
            if first_rank == 0 {
                first_rank = rank;
            }
            last_rank = rank;
        }
    }
    let ap = precision_sum / total_matches as f64;
    let inp = total_matches as f64 / last_rank as f64;
    Ok((ap, inp, first_rank))
}

/// Evaluates one task under one mode. Queries are the rows of `query_set`
/// with the task's query modality that have at least one identity match in
/// the gallery (rows of `gallery_set` with the gallery modality); metrics
/// are averaged over queries in row order.
pub fn evaluate_retrieval(
    query_set: &EmbeddingSet,
    gallery_set: &EmbeddingSet,
    task: EvalTask,
    mode: EvalMode,
) -> Result<RankingMetrics> {
    let (want_q, want_g) = mode.expected_tags();
    if query_set.source_tag() != want_q {
        return Err(Error::Argument(format!(
            "{mode} mode requires query source {want_q:?}, got {:?}",
            query_set.source_tag()
        )));
    }
    if gallery_set.source_tag() != want_g {
        return Err(Error::Argument(format!(
            "{mode} mode requires gallery source {want_g:?}, got {:?}",
            gallery_set.source_tag()
        )));
    }
    if query_set.dim() != gallery_set.dim() {
        return Err(Error::Argument("query and gallery feature dimensions differ".into()));
    }

    let gallery_rows = gallery_set.rows_with_modality(task.gallery);
    if gallery_rows.is_empty() {
        return Err(Error::Eval(format!("gallery has no {} rows", task.gallery)));
    }
    let mut g_features = ndarray::Array2::zeros((gallery_rows.len(), gallery_set.dim()));
    let mut g_ids = Vec::with_capacity(gallery_rows.len());
    let mut g_samples = Vec::with_capacity(gallery_rows.len());
    for (i, &r) in gallery_rows.iter().enumerate() {
        g_features.row_mut(i).assign(&gallery_set.features().row(r));
        g_ids.push(gallery_set.meta()[r].identity_id);
        g_samples.push(gallery_set.meta()[r].sample_id);
    }
    let gallery = GalleryView {
        features: g_features.view(),
        identity_ids: &g_ids,
        sample_ids: &g_samples,
    };

    let mut ap_sum = 0.0;
    let mut inp_sum = 0.0;
    let mut hits = [0usize; 3]; // ranks 1, 5, 10
    let mut n_queries = 0;
    for row in query_set.rows_with_modality(task.query) {
        let id = query_set.meta()[row].identity_id;
        if !g_ids.contains(&id) {
            continue;
        }
        let (ap, inp, first) = evaluate_query(query_set.features().row(row), id, &gallery)?;
        ap_sum += ap;
        inp_sum += inp;
        for (slot, k) in [1usize, 5, 10].iter().enumerate() {
            if first <= *k {
                hits[slot] += 1;
            }
        }
        n_queries += 1;
    }
    if n_queries == 0 {
        return Err(Error::Eval(format!(
            "no eligible {} queries share an identity with the gallery",
            task.query
        )));
    }
    let frac = |h: usize| h as f64 / n_queries as f64;
    Ok(RankingMetrics {
        rank1: frac(hits[0]),
        rank5: frac(hits[1]),
        rank10: frac(hits[2]),
        map: ap_sum / n_queries as f64,
        minp: inp_sum / n_queries as f64,
        n_queries,
    })
}

/// Renders metric rows to CSV, one line per (task, mode) entry.
pub fn metrics_to_csv(entries: &[(EvalTask, EvalMode, RankingMetrics)]) -> String {
    let mut out = String::from("task,mode,rank1,rank5,rank10,map,minp,n_queries\n");
    for (task, mode, m) in entries {
        out.push_str(&format!(
            "{task},{mode},{},{},{},{},{},{}\n",
            m.rank1, m.rank5, m.rank10, m.map, m.minp, m.n_queries
        ));
    }
    out
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
