//! Embedding sets: feature matrices with identity/modality metadata, file
//! formats, and the identity-balanced multi-modality batch sampler.

mod formats;
mod sampler;

pub use formats::{load_embedding_set, save_embedding_set, FileFormat};
pub use sampler::{sample_batch, Batch};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input modality of a sample. The declaration order defines the total
/// ordering used for deterministic modality-pair enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
    Sketch,
    Text,
}

impl Modality {
    /// All modalities in canonical order.
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Ir, Modality::Sketch, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::Sketch => "sketch",
            Modality::Text => "text",
        }
    }

    /// The six unordered modality pairs in canonical order.
    pub fn pairs() -> [(Modality, Modality); 6] {
        [
            (Modality::Rgb, Modality::Ir),
            (Modality::Rgb, Modality::Sketch),
            (Modality::Rgb, Modality::Text),
            (Modality::Ir, Modality::Sketch),
            (Modality::Ir, Modality::Text),
            (Modality::Sketch, Modality::Text),
        ]
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            "sketch" => Ok(Modality::Sketch),
            "text" => Ok(Modality::Text),
            other => Err(Error::Data(format!("unknown modality {other:?}"))),
        }
    }
}

/// Per-sample metadata: identity label, modality, and a set-unique sample id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub identity_id: usize,
    pub modality: Modality,
    pub sample_id: usize,
}

/// An n x d feature matrix with per-row metadata and an optional n x d_in
/// matrix of raw student inputs. Immutable after construction; all
/// invariants are validated in [`EmbeddingSet::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f64>,
    meta: Vec<SampleMeta>,
    raw_inputs: Option<Array2<f64>>,
    source_tag: String,
}

impl EmbeddingSet {
    pub fn new(
        features: Array2<f64>,
        meta: Vec<SampleMeta>,
        raw_inputs: Option<Array2<f64>>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let set = Self { features, meta, raw_inputs, source_tag: source_tag.into() };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.meta.len() != n {
            return Err(Error::Data(format!(
                "metadata length {} does not match feature row count {n}",
                self.meta.len()
            )));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("feature matrix contains a non-finite value".into()));
        }
        if let Some(raw) = &self.raw_inputs {
            if raw.nrows() != n {
                return Err(Error::Data(format!(
                    "raw input row count {} does not match feature row count {n}",
                    raw.nrows()
                )));
            }
            if !raw.iter().all(|v| v.is_finite()) {
                return Err(Error::Data("raw input matrix contains a non-finite value".into()));
            }
        }
        let mut sample_ids: Vec<usize> = self.meta.iter().map(|m| m.sample_id).collect();
        sample_ids.sort_unstable();
        if sample_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("duplicate sample_id in metadata".into()));
        }
        // Identity labels must form the contiguous range [0, C).
        let mut ids: Vec<usize> = self.meta.iter().map(|m| m.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if let Some(&max_id) = ids.last() {
            if max_id + 1 != ids.len() || ids[0] != 0 {
                return Err(Error::Data(format!(
                    "identity ids are not contiguous from 0 (found {} distinct, max {max_id})",
                    ids.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Raw-input dimension d_in, or 0 when raw inputs are absent.
    pub fn input_dim(&self) -> usize {
        self.raw_inputs.as_ref().map_or(0, |r| r.ncols())
    }

    /// Number of distinct identities C.
    pub fn identity_count(&self) -> usize {
        self.meta.iter().map(|m| m.identity_id + 1).max().unwrap_or(0)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn raw_inputs(&self) -> Option<&Array2<f64>> {
        self.raw_inputs.as_ref()
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Same set under a different source tag.
    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    /// Row indices grouped by identity, identities in ascending order.
    pub fn rows_by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, m) in self.meta.iter().enumerate() {
            map.entry(m.identity_id).or_default().push(row);
        }
        map
    }

    /// Row indices carrying the given modality.
    pub fn rows_with_modality(&self, modality: Modality) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.modality == modality)
            .map(|(row, _)| row)
            .collect()
    }

    /// A new set holding the given rows, with identity ids remapped to a
    /// contiguous range (preserving their relative order). Sample ids and
    /// the source tag are carried over unchanged.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Argument(format!("row index {r} out of bounds")));
            }
        }
        let mut kept_ids: Vec<usize> = rows.iter().map(|&r| self.meta[r].identity_id).collect();
        kept_ids.sort_unstable();
        kept_ids.dedup();
        let remap: BTreeMap<usize, usize> =
            kept_ids.iter().enumerate().map(|(new, &old)| (old, new)).collect();

        let d = self.dim();
        let mut features = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            features.row_mut(i).assign(&self.features.row(r));
        }
        let raw_inputs = self.raw_inputs.as_ref().map(|raw| {
            let mut sub = Array2::zeros((rows.len(), raw.ncols()));
            for (i, &r) in rows.iter().enumerate() {
                sub.row_mut(i).assign(&raw.row(r));
            }
            sub
        });
        let meta = rows
            .iter()
            .map(|&r| {
                let m = self.meta[r];
                SampleMeta { identity_id: remap[&m.identity_id], ..m }
            })
            .collect();
        Self::new(features, meta, raw_inputs, self.source_tag.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn meta(id: usize, modality: Modality, sample_id: usize) -> SampleMeta {
        SampleMeta { identity_id: id, modality, sample_id }
    }

    #[test]
    fn modality_ordering_and_pairs() {
        assert!(Modality::Rgb < Modality::Ir);
        assert!(Modality::Ir < Modality::Sketch);
        assert!(Modality::Sketch < Modality::Text);
        let pairs = Modality::pairs();
        assert_eq!(pairs.len(), 6);
        for (a, b) in pairs {
            assert!(a < b);
        }
        assert_eq!(pairs[0], (Modality::Rgb, Modality::Ir));
        assert_eq!(pairs[5], (Modality::Sketch, Modality::Text));
    }

    #[test]
    fn modality_round_trips_lowercase() {
        for m in Modality::ALL {
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
        }
        assert!("infrared".parse::<Modality>().is_err());
    }

    #[test]
    fn set_rejects_meta_length_mismatch() {
        let feats = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let err = EmbeddingSet::new(feats, vec![meta(0, Modality::Rgb, 0)], None, "cloud");
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn set_rejects_non_finite_features() {
        let feats = arr2(&[[1.0, f64::NAN]]);
        let err = EmbeddingSet::new(feats, vec![meta(0, Modality::Rgb, 0)], None, "cloud");
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn set_rejects_duplicate_sample_ids() {
        let feats = arr2(&[[1.0], [2.0]]);
        let err = EmbeddingSet::new(
            feats,
            vec![meta(0, Modality::Rgb, 3), meta(0, Modality::Ir, 3)],
            None,
            "cloud",
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn set_rejects_non_contiguous_identities() {
        let feats = arr2(&[[1.0], [2.0]]);
        let err = EmbeddingSet::new(
            feats,
            vec![meta(0, Modality::Rgb, 0), meta(2, Modality::Rgb, 1)],
            None,
            "cloud",
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn set_rejects_raw_input_row_mismatch() {
        let feats = arr2(&[[1.0], [2.0]]);
        let raw = arr2(&[[0.5]]);
        let err = EmbeddingSet::new(
            feats,
            vec![meta(0, Modality::Rgb, 0), meta(0, Modality::Ir, 1)],
            Some(raw),
            "cloud",
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn empty_set_is_valid() {
        let set = EmbeddingSet::new(Array2::zeros((0, 3)), vec![], None, "cloud").unwrap();
        assert!(set.is_empty());
        assert_eq!(set.identity_count(), 0);
    }

    #[test]
    fn subset_remaps_identities() {
        let feats = arr2(&[[1.0], [2.0], [3.0]]);
        let set = EmbeddingSet::new(
            feats,
            vec![meta(0, Modality::Rgb, 0), meta(1, Modality::Rgb, 1), meta(2, Modality::Ir, 2)],
            None,
            "cloud",
        )
        .unwrap();
        let sub = set.subset(&[1, 2]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.meta()[0].identity_id, 0);
        assert_eq!(sub.meta()[1].identity_id, 1);
        assert_eq!(sub.meta()[1].sample_id, 2);
        assert_eq!(sub.features()[[0, 0]], 2.0);
    }
}
