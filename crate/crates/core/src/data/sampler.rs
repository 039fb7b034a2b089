//! Identity-balanced PK batch sampling with round-robin modality coverage.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::Modality;

use super::EmbeddingSet;

/// Row indices for one training batch: P identity groups of K samples each,
/// stored group-major (`indices[g*k..(g+1)*k]` is group g).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Iterator over the P identity groups.
    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(self.k)
    }
}

/// Draws P identities and K samples each. Within an identity, draws rotate
/// round-robin over its available modalities (canonical modality order), so
/// at least two modalities appear whenever the identity has at least two.
/// Each per-modality pool is drawn without replacement until exhausted, then
/// with replacement, so indices may repeat only once a pool runs dry.
pub fn sample_batch(
    set: &EmbeddingSet,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if p == 0 {
        return Err(Error::Argument("P must be positive".into()));
    }
    if k < 2 {
        return Err(Error::Argument(format!("K must be at least 2, got {k}")));
    }
    let groups = set.rows_by_identity();
    if groups.len() < p {
        return Err(Error::Sampling(format!(
            "requested {p} identities but the set has only {}",
            groups.len()
        )));
    }

    let mut identity_ids: Vec<usize> = groups.keys().copied().collect();
    identity_ids.shuffle(rng);
    identity_ids.truncate(p);

    let mut indices = Vec::with_capacity(p * k);
    for id in identity_ids {
        let mut pools: BTreeMap<Modality, Vec<usize>> = BTreeMap::new();
        for &row in &groups[&id] {
            pools.entry(set.meta()[row].modality).or_default().push(row);
        }
        let modalities: Vec<Modality> = pools.keys().copied().collect();
        if modalities.len() == 1 {
            warn!("identity {id} has a single modality ({}); group falls back to it", modalities[0]);
        }
        // Shuffled draw queues, consumed front to back.
        let mut queues: BTreeMap<Modality, Vec<usize>> = pools
            .iter()
            .map(|(&m, rows)| {
                let mut q = rows.clone();
                q.shuffle(rng);
                (m, q)
            })
            .collect();
        for draw in 0..k {
            let modality = modalities[draw % modalities.len()];
            let queue = queues.get_mut(&modality).expect("pool exists");
            let row = match queue.pop() {
                Some(row) => row,
                None => {
                    let pool = &pools[&modality];
                    pool[rng.random_range(0..pool.len())]
                }
            };
            indices.push(row);
        }
    }
    Ok(Batch { indices, p, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleMeta;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `ids x per-modality counts` fixture; features are row indices.
    fn build_set(n_ids: usize, per_modality: &[(Modality, usize)]) -> EmbeddingSet {
        let mut meta = Vec::new();
        let mut sample_id = 0;
        for id in 0..n_ids {
            for &(m, count) in per_modality {
                for _ in 0..count {
                    meta.push(SampleMeta { identity_id: id, modality: m, sample_id });
                    sample_id += 1;
                }
            }
        }
        let n = meta.len();
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        EmbeddingSet::new(features, meta, None, "cloud").unwrap()
    }

    #[test]
    fn full_scale_batch_covers_all_modalities() {
        let set = build_set(
            16,
            &[(Modality::Rgb, 2), (Modality::Ir, 2), (Modality::Sketch, 2), (Modality::Text, 2)],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = sample_batch(&set, 16, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        for group in batch.groups() {
            let ids: Vec<usize> = group.iter().map(|&r| set.meta()[r].identity_id).collect();
            assert!(ids.windows(2).all(|w| w[0] == w[1]), "group spans identities");
            for m in Modality::ALL {
                let count = group.iter().filter(|&&r| set.meta()[r].modality == m).count();
                assert_eq!(count, 2, "modality {m} not drawn twice");
            }
            let mut sorted = group.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 8, "duplicates before pool exhaustion");
        }
    }

    #[test]
    fn single_modality_identity_falls_back() {
        let mut set = build_set(
            4,
            &[(Modality::Rgb, 8), (Modality::Ir, 8), (Modality::Sketch, 8), (Modality::Text, 8)],
        );
        // Rebuild with identity 3 reduced to RGB only.
        let keep: Vec<usize> = set
            .meta()
            .iter()
            .enumerate()
            .filter(|(_, m)| m.identity_id != 3 || m.modality == Modality::Rgb)
            .map(|(row, _)| row)
            .collect();
        set = set.subset(&keep).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&set, 4, 8, &mut rng).unwrap();
        for group in batch.groups() {
            let id = set.meta()[group[0]].identity_id;
            if id == 3 {
                assert!(group.iter().all(|&r| set.meta()[r].modality == Modality::Rgb));
            }
        }
    }

    #[test]
    fn same_seed_reproduces_batch() {
        let set = build_set(8, &[(Modality::Rgb, 2), (Modality::Text, 2)]);
        let a = sample_batch(&set, 4, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_batch(&set, 4, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_identities_errors() {
        let set = build_set(3, &[(Modality::Rgb, 4)]);
        let err = sample_batch(&set, 4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Sampling(_))));
    }

    #[test]
    fn exhausted_pool_resamples_with_replacement() {
        // One identity with a single RGB sample; K=2 must repeat it.
        let set = build_set(1, &[(Modality::Rgb, 1)]);
        let batch = sample_batch(&set, 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.indices, vec![0, 0]);
    }

    #[test]
    fn two_modality_identity_draws_both() {
        let set = build_set(2, &[(Modality::Ir, 4), (Modality::Sketch, 4)]);
        let batch = sample_batch(&set, 2, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for group in batch.groups() {
            let mods: Vec<Modality> = group.iter().map(|&r| set.meta()[r].modality).collect();
            assert!(mods.contains(&Modality::Ir));
            assert!(mods.contains(&Modality::Sketch));
        }
    }
}
