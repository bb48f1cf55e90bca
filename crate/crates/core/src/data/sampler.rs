use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::data::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::rng;

/// One epoch of identity-balanced batches over the train split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub p: usize,
    pub k: usize,
    /// Record indices into `DatasetIndex::records`, `p * k` per batch.
    pub batches: Vec<Vec<usize>>,
}

/// PK sampling: every batch holds `p` distinct identities with `k` samples
/// each. Identities with fewer than `k` train samples are drawn with
/// replacement; leftover samples that do not fill a chunk of `k` are dropped
/// for the epoch.
pub fn make_pk_sampler(index: &DatasetIndex, p: usize, k: usize, seed: u64) -> Result<BatchPlan> {
    if p == 0 || k == 0 {
        return Err(Error::Config(format!("P and K must be positive (got P={p}, K={k})")));
    }
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in index.indices_of(Split::Train) {
        by_identity.entry(index.records[i].identity_id).or_default().push(i);
    }
    if p > by_identity.len() {
        return Err(Error::Config(format!(
            "P={p} exceeds the {} identities with train samples",
            by_identity.len()
        )));
    }

    let mut rng = rng::seeded(seed);
    let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = Vec::with_capacity(by_identity.len());
    for (id, mut samples) in by_identity {
        if samples.len() < k {
            samples = (0..k).map(|_| *samples.choose(&mut rng).expect("non-empty")).collect();
        }
        samples.shuffle(&mut rng);
        let per_id: Vec<Vec<usize>> = samples.chunks_exact(k).map(<[usize]>::to_vec).collect();
        chunks.push((id, per_id));
    }

    let mut batches = Vec::new();
    loop {
        let mut available: Vec<usize> = chunks
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| !c.is_empty())
            .map(|(i, _)| i)
            .collect();
        if available.len() < p {
            break;
        }
        available.shuffle(&mut rng);
        let mut batch = Vec::with_capacity(p * k);
        for &slot in &available[..p] {
            batch.extend(chunks[slot].1.pop().expect("slot has a chunk"));
        }
        batches.push(batch);
    }
    Ok(BatchPlan { p, k, batches })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::data::{ImageRef, SampleRecord};
    use crate::image::Image;

    fn index(ids: usize, per_id: usize) -> DatasetIndex {
        let img = Arc::new(Image::filled(2, 2, [0.0; 3]));
        let records = (0..ids * per_id)
            .map(|i| SampleRecord {
                image_ref: ImageRef::Memory(img.clone()),
                identity_id: i / per_id,
                clothes_id: i / per_id,
                camera_id: 0,
                split: Split::Train,
            })
            .collect();
        DatasetIndex::from_records(None, records).unwrap()
    }

    fn check_batch(idx: &DatasetIndex, batch: &[usize], p: usize, k: usize) {
        assert_eq!(batch.len(), p * k);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in batch {
            *counts.entry(idx.records[i].identity_id).or_default() += 1;
        }
        assert_eq!(counts.len(), p);
        assert!(counts.values().all(|&c| c == k));
    }

    #[test]
    fn eight_ids_p4_k2() {
        let idx = index(8, 4);
        let plan = make_pk_sampler(&idx, 4, 2, 0).unwrap();
        assert!(!plan.batches.is_empty());
        for b in &plan.batches {
            check_batch(&idx, b, 4, 2);
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let idx = index(8, 5);
        let a = make_pk_sampler(&idx, 4, 2, 7).unwrap();
        let b = make_pk_sampler(&idx, 4, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = make_pk_sampler(&idx, 4, 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_identities_requested() {
        let idx = index(4, 2);
        assert!(matches!(make_pk_sampler(&idx, 10, 2, 0), Err(Error::Config(_))));
        assert!(matches!(make_pk_sampler(&idx, 0, 2, 0), Err(Error::Config(_))));
        assert!(matches!(make_pk_sampler(&idx, 2, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn small_identities_drawn_with_replacement() {
        let idx = index(3, 1);
        let plan = make_pk_sampler(&idx, 3, 4, 1).unwrap();
        assert_eq!(plan.batches.len(), 1);
        check_batch(&idx, &plan.batches[0], 3, 4);
    }

    proptest! {
        #[test]
        fn every_anchor_has_positive_and_negative(
            ids in 2usize..8, per_id in 1usize..7, p in 2usize..5, k in 2usize..5, seed in 0u64..1000
        ) {
            prop_assume!(p <= ids);
            let idx = index(ids, per_id);
            let plan = make_pk_sampler(&idx, p, k, seed).unwrap();
            for b in &plan.batches {
                check_batch(&idx, b, p, k);
                for (a, &ia) in b.iter().enumerate() {
                    let id = idx.records[ia].identity_id;
                    let pos = b.iter().enumerate().any(|(j, &ij)| j != a && idx.records[ij].identity_id == id);
                    let neg = b.iter().any(|&ij| idx.records[ij].identity_id != id);
                    prop_assert!(pos && neg);
                }
            }
        }
    }
}
