//! Exemplar memory and mixed old/new batch streams.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::ids::{ClassId, DomainId};
use crate::numerics::DenseMatrix;

/// Chooses which samples of one class to keep.
pub trait SelectionPolicy {
    /// Returns `k` distinct indices in `0..n`.
    fn select(&self, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

/// Uniform sampling without replacement.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomSelection;

impl SelectionPolicy for RandomSelection {
    fn select(&self, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx = index::sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Number of exemplars kept from a class of `n` samples.
pub fn retained_count(fraction: f64, n: usize) -> usize {
    // the small slack keeps products like 0.29 * 100 from flooring to 28
    (((fraction * n as f64) + 1e-9).floor() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExemplarStore {
    buckets: BTreeMap<ClassId, Vec<Sample>>,
    original_sizes: BTreeMap<ClassId, usize>,
    seed: u64,
}

impl ExemplarStore {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Total number of stored samples.
    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.buckets.keys().copied()
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.buckets.get(&class).map_or(0, Vec::len)
    }

    pub fn original_size(&self, class: ClassId) -> Option<usize> {
        self.original_sizes.get(&class).copied()
    }

    pub fn samples(&self, class: ClassId) -> &[Sample] {
        self.buckets.get(&class).map_or(&[], Vec::as_slice)
    }

    /// All stored samples, ordered by class then selection order.
    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.buckets.values().flatten()
    }

    pub fn domains(&self) -> Vec<DomainId> {
        let mut d: Vec<DomainId> = self.iter().map(|s| s.domain).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Adds the buckets of `other`. A class present in both (a label shared
    /// across domains) keeps the samples of both selections.
    pub fn merge(&mut self, other: ExemplarStore) {
        for (class, samples) in other.buckets {
            self.buckets.entry(class).or_default().extend(samples);
        }
        for (class, n) in other.original_sizes {
            *self.original_sizes.entry(class).or_default() += n;
        }
    }
}

/// Keeps `max(1, ⌊fraction·n⌋)` samples of every class in `samples`.
pub fn select_exemplars(samples: &[Sample], fraction: f64, seed: u64) -> Result<ExemplarStore> {
    select_exemplars_with(samples, fraction, seed, &RandomSelection)
}

pub fn select_exemplars_with(
    samples: &[Sample],
    fraction: f64,
    seed: u64,
    policy: &dyn SelectionPolicy,
) -> Result<ExemplarStore> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "exemplar fraction must be in (0, 1], got {fraction}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data("cannot select exemplars from an empty sample set".into()));
    }
    let mut by_class: BTreeMap<ClassId, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ExemplarStore::empty(seed);
    for (class, members) in by_class {
        let k = retained_count(fraction, members.len());
        let picked = policy.select(members.len(), k, &mut rng);
        store
            .buckets
            .insert(class, picked.into_iter().map(|i| members[i].clone()).collect());
        store.original_sizes.insert(class, members.len());
    }
    Ok(store)
}

/// One mini-batch of the mixed stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: DenseMatrix,
    pub labels: Vec<ClassId>,
    pub domains: Vec<DomainId>,
    /// `true` for replayed exemplars.
    pub old: Vec<bool>,
    /// Position of each sample in the unshuffled union (exemplars first).
    pub positions: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffles exemplars ∪ new samples and cuts the stream into batches.
pub fn build_increment_batches(
    store: &ExemplarStore,
    new_samples: &[Sample],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let union: Vec<(&Sample, bool)> = store
        .iter()
        .map(|s| (s, true))
        .chain(new_samples.iter().map(|s| (s, false)))
        .collect();
    if union.is_empty() {
        return Err(Error::Data("no exemplars and no new samples to train on".into()));
    }
    let min = if !store.is_empty() && !new_samples.is_empty() {
        2
    } else {
        1
    };
    if batch_size < min {
        return Err(Error::Parameter(format!(
            "batch size must be at least {min}, got {batch_size}"
        )));
    }
    let dim = union[0].0.features.len();
    if let Some((s, _)) = union.iter().find(|(s, _)| s.features.len() != dim) {
        return Err(Error::Shape(format!(
            "sample of class {} has {} features, expected {dim}",
            s.label,
            s.features.len()
        )));
    }
    let mut order: Vec<usize> = (0..union.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                data.extend_from_slice(&union[i].0.features);
            }
            Ok(Batch {
                features: DenseMatrix::new(chunk.len(), dim, data)?,
                labels: chunk.iter().map(|&i| union[i].0.label).collect(),
                domains: chunk.iter().map(|&i| union[i].0.domain).collect(),
                old: chunk.iter().map(|&i| union[i].1).collect(),
                positions: chunk.to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(classes: &[(u32, usize)]) -> Vec<Sample> {
        let mut out = Vec::new();
        for &(c, n) in classes {
            for i in 0..n {
                out.push(Sample {
                    features: vec![c as f64, i as f64],
                    label: ClassId(c),
                    domain: DomainId(0),
                });
            }
        }
        out
    }

    #[test]
    fn ten_percent_of_fifty() {
        let store = select_exemplars(&samples(&[(0, 50), (1, 50)]), 0.1, 3).unwrap();
        assert_eq!(store.count(ClassId(0)), 5);
        assert_eq!(store.count(ClassId(1)), 5);
        assert_eq!(store.original_size(ClassId(0)), Some(50));
        assert!(store.iter().all(|s| s.features[0] as u32 == s.label.0));
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let all = samples(&[(0, 7), (4, 3)]);
        let store = select_exemplars(&all, 1.0, 1).unwrap();
        assert_eq!(store.len(), 10);
        let kept: Vec<&Sample> = store.iter().collect();
        for s in &all {
            assert!(kept.contains(&s));
        }
    }

    #[test]
    fn minimum_one_per_class() {
        let store = select_exemplars(&samples(&[(0, 3), (1, 40)]), 0.1, 0).unwrap();
        assert_eq!(store.count(ClassId(0)), 1);
        assert_eq!(store.count(ClassId(1)), 4);
    }

    #[test]
    fn floor_is_not_fooled_by_rounding() {
        assert_eq!(retained_count(0.29, 100), 29);
        assert_eq!(retained_count(0.1, 80), 8);
        assert_eq!(retained_count(0.15, 10), 1);
    }

    #[test]
    fn selection_is_deterministic() {
        let all = samples(&[(0, 30), (1, 30)]);
        let a = select_exemplars(&all, 0.2, 9).unwrap();
        let b = select_exemplars(&all, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let c = select_exemplars(&all, 0.2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(select_exemplars(&[], 0.1, 0), Err(Error::Data(_))));
        assert!(matches!(
            select_exemplars(&samples(&[(0, 4)]), 0.0, 0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            select_exemplars(&samples(&[(0, 4)]), 1.5, 0),
            Err(Error::Parameter(_))
        ));
        let empty = ExemplarStore::empty(0);
        assert!(matches!(
            build_increment_batches(&empty, &[], 4, 0),
            Err(Error::Data(_))
        ));
        let store = select_exemplars(&samples(&[(0, 4)]), 1.0, 0).unwrap();
        assert!(matches!(
            build_increment_batches(&store, &samples(&[(1, 4)]), 1, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn merge_appends_shared_classes() {
        let mut a = select_exemplars(&samples(&[(0, 4)]), 1.0, 0).unwrap();
        let b = select_exemplars(&samples(&[(1, 4)]), 0.5, 0).unwrap();
        a.merge(b.clone());
        assert_eq!(a.len(), 6);
        a.merge(b);
        assert_eq!(a.count(ClassId(1)), 4);
        assert_eq!(a.original_size(ClassId(1)), Some(8));
    }

    #[test]
    fn ten_plus_ten_batch_four() {
        let store = select_exemplars(&samples(&[(0, 10)]), 1.0, 0).unwrap();
        let new = samples(&[(1, 10)]);
        let batches = build_increment_batches(&store, &new, 4, 5).unwrap();
        assert_eq!(batches.len(), 5);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.positions.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for b in &batches {
            assert_eq!(b.len(), 4);
            for i in 0..b.len() {
                assert_eq!(b.old[i], b.labels[i] == ClassId(0));
                assert_eq!(b.positions[i] < 10, b.old[i]);
            }
        }
        assert_eq!(batches, build_increment_batches(&store, &new, 4, 5).unwrap());
    }

    #[test]
    fn first_increment_is_all_new() {
        let batches = build_increment_batches(&ExemplarStore::empty(0), &samples(&[(0, 5)]), 2, 0).unwrap();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.old.iter().all(|o| !o)));
    }

    proptest! {
        #[test]
        fn store_invariants(counts in prop::collection::vec(1usize..40, 1..5), fraction in 0.01f64..=1.0, seed in 0u64..100) {
            let classes: Vec<(u32, usize)> = counts.iter().enumerate().map(|(c, &n)| (c as u32, n)).collect();
            let store = select_exemplars(&samples(&classes), fraction, seed).unwrap();
            for &(c, n) in &classes {
                let k = store.count(ClassId(c));
                prop_assert!(k >= 1 && k <= n);
                prop_assert_eq!(k, ((fraction * n as f64 + 1e-9).floor() as usize).max(1).min(n));
                prop_assert!(store.samples(ClassId(c)).iter().all(|s| s.label == ClassId(c)));
                let mut idx: Vec<u64> = store.samples(ClassId(c)).iter().map(|s| s.features[1] as u64).collect();
                idx.dedup();
                prop_assert_eq!(idx.len(), k);
            }
        }

        #[test]
        fn batches_cover_union(n_old in 0usize..30, n_new in 1usize..30, batch in 2usize..9, seed in 0u64..100) {
            let store = if n_old == 0 {
                ExemplarStore::empty(0)
            } else {
                select_exemplars(&samples(&[(0, n_old)]), 1.0, 0).unwrap()
            };
            let batches = build_increment_batches(&store, &samples(&[(1, n_new)]), batch, seed).unwrap();
            prop_assert_eq!(batches.len(), (n_old + n_new).div_ceil(batch));
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.positions.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n_old + n_new).collect::<Vec<_>>());
        }
    }
}
