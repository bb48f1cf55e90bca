//! Per-sample feature operations: horizontal partitioning, quality-weighted
//! pooling, global fusion and test-time channel screening.
//!
//! The batched model calls these same functions sample by sample, so the
//! training path and the screened evaluation path share every floating-point
//! operation.

use ndarray::{s, Array1, Array3, Axis};

use crate::error::{Error, Result};

/// Splits a `C x H x W` map into `k` slabs of `H / k` rows, top to bottom.
pub fn partition(features: &Array3<f64>, k: usize) -> Result<Vec<Array3<f64>>> {
    let h = features.dim().1;
    if k == 0 || !h.is_multiple_of(k) {
        return Err(Error::Shape(format!("height {h} is not divisible into {k} partitions")));
    }
    let rows = h / k;
    Ok((0..k)
        .map(|i| features.slice(s![.., i * rows..(i + 1) * rows, ..]).to_owned())
        .collect())
}

/// Inverse of [`partition`]: stacks slabs along the height axis.
pub fn concat_parts(parts: &[Array3<f64>]) -> Result<Array3<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Spatial mean per channel.
pub fn pool_global(features: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = features.dim();
    let area = (h * w) as f64;
    Array1::from_shape_fn(c, |ch| {
        let mut acc = 0.0;
        for v in features.index_axis(Axis(0), ch) {
            acc += v;
        }
        acc / area
    })
}

/// Multiplies every spatial position of channel `c` by `quality[c]`, then
/// averages over space.
pub fn weighted_pool(part: &Array3<f64>, quality: &Array1<f64>) -> Result<Array1<f64>> {
    let (c, h, w) = part.dim();
    if quality.len() != c {
        return Err(Error::Shape(format!(
            "part has {c} channels but quality vector has {}",
            quality.len()
        )));
    }
    let area = (h * w) as f64;
    Ok(Array1::from_shape_fn(c, |ch| {
        let q = quality[ch];
        let mut acc = 0.0;
        for v in part.index_axis(Axis(0), ch) {
            acc += v * q;
        }
        acc / area
    }))
}

/// Stacks the `k` part vectors along height and average-pools: the
/// arithmetic mean of the vectors.
pub fn fuse_global(weighted_parts: &[Array1<f64>]) -> Result<Array1<f64>> {
    let first = weighted_parts
        .first()
        .ok_or_else(|| Error::Config("cannot fuse an empty list of part vectors".into()))?;
    let c = first.len();
    if weighted_parts.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("part vectors differ in length".into()));
    }
    let k = weighted_parts.len() as f64;
    Ok(Array1::from_shape_fn(c, |ch| {
        let mut acc = 0.0;
        for p in weighted_parts {
            acc += p[ch];
        }
        acc / k
    }))
}

/// Zeroes every score strictly below `lambda`; scores equal to it survive.
pub fn screen(quality: &Array1<f64>, lambda: f64) -> Array1<f64> {
    quality.mapv(|q| if q < lambda { 0.0 } else { q })
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("screening threshold {lambda} outside [0,1]")))
    }
}

/// Test-time embedding: screen each part's scores at `lambda`, weight and
/// pool each part, then fuse.
pub fn screen_and_embed(parts: &[Array3<f64>], quality: &[Array1<f64>], lambda: f64) -> Result<Array1<f64>> {
    check_lambda(lambda)?;
    if parts.len() != quality.len() {
        return Err(Error::Shape(format!(
            "{} parts but {} quality vectors",
            parts.len(),
            quality.len()
        )));
    }
    let weighted = parts
        .iter()
        .zip(quality)
        .map(|(p, q)| weighted_pool(p, &screen(q, lambda)))
        .collect::<Result<Vec<_>>>()?;
    fuse_global(&weighted)
}

/// Number of channels kept by screening at `lambda`.
pub fn surviving_channels(quality: &Array1<f64>, lambda: f64) -> usize {
    quality.iter().filter(|&&q| q >= lambda).count()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn six_two_row_slabs() {
        let f = random_map(0, 4, 12, 3);
        let parts = partition(&f, 6).unwrap();
        assert_eq!(parts.len(), 6);
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(p.dim(), (4, 2, 3));
            assert_eq!(p, &f.slice(s![.., 2 * i..2 * i + 2, ..]));
        }
        assert_eq!(concat_parts(&parts).unwrap(), f);
    }

    #[test]
    fn single_partition_is_whole_map() {
        let f = random_map(1, 3, 6, 2);
        assert_eq!(partition(&f, 1).unwrap(), vec![f]);
    }

    #[test]
    fn indivisible_height_rejected() {
        let f = random_map(1, 3, 12, 2);
        assert!(matches!(partition(&f, 5), Err(Error::Shape(_))));
        assert!(matches!(partition(&f, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn weighted_pool_edge_cases() {
        let f = random_map(2, 5, 2, 4);
        let mean = pool_global(&f);
        let ones = weighted_pool(&f, &Array1::ones(5)).unwrap();
        for (a, b) in ones.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(weighted_pool(&f, &Array1::zeros(5)).unwrap().iter().all(|&v| v == 0.0));
        assert!(weighted_pool(&f, &Array1::zeros(4)).is_err());

        let consts = Array1::from_vec(vec![1.0, -2.0, 0.5]);
        let field = Array3::from_shape_fn((3, 2, 3), |(c, _, _)| consts[c]);
        let phi = Array1::from_vec(vec![0.2, 0.7, 0.9]);
        let got = weighted_pool(&field, &phi).unwrap();
        for c in 0..3 {
            assert!((got[c] - consts[c] * phi[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_is_mean() {
        let v = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(fuse_global(&[v.clone(), v.clone(), v.clone()]).unwrap(), v);
        let a = Array1::from_vec(vec![1.0, 4.0]);
        let b = Array1::from_vec(vec![3.0, 0.0]);
        assert_eq!(fuse_global(&[a, b]).unwrap(), Array1::from_vec(vec![2.0, 2.0]));
        assert!(matches!(fuse_global(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn pool_global_cases() {
        let f = Array3::from_elem((2, 3, 4), 1.5);
        assert_eq!(pool_global(&f), Array1::from_elem(2, 1.5));
        assert_eq!(pool_global(&Array3::<f64>::zeros((2, 3, 4))), Array1::<f64>::zeros(2));
        let g = random_map(3, 4, 6, 2);
        let parts = partition(&g, 3).unwrap();
        let means: Vec<_> = parts.iter().map(pool_global).collect();
        let fused = fuse_global(&means).unwrap();
        for (a, b) in fused.iter().zip(pool_global(&g).iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn screening_toy_case() {
        let phi = Array1::from_vec(vec![0.2, 0.4]);
        assert_eq!(screen(&phi, 0.35), Array1::from_vec(vec![0.0, 0.4]));
        // equality survives
        assert_eq!(screen(&phi, 0.4), Array1::from_vec(vec![0.0, 0.4]));
    }

    #[test]
    fn screening_extremes() {
        let f = random_map(4, 3, 4, 2);
        let parts = partition(&f, 2).unwrap();
        let q = vec![
            Array1::from_vec(vec![0.1, 0.5, 0.99]),
            Array1::from_vec(vec![0.3, 0.6, 0.01]),
        ];
        let plain: Vec<_> = parts.iter().zip(&q).map(|(p, q)| weighted_pool(p, q).unwrap()).collect();
        assert_eq!(screen_and_embed(&parts, &q, 0.0).unwrap(), fuse_global(&plain).unwrap());
        assert!(screen_and_embed(&parts, &q, 1.0).unwrap().iter().all(|&v| v == 0.0));
        assert!(screen_and_embed(&parts, &q, 1.2).is_err());
        assert!(screen_and_embed(&parts, &q, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn fuse_ignores_order(vals in proptest::collection::vec(-10.0f64..10.0, 12), seed in 0u64..100) {
            let parts: Vec<Array1<f64>> = vals.chunks(3).map(|c| Array1::from_vec(c.to_vec())).collect();
            let mut shuffled = parts.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let a = fuse_global(&parts).unwrap();
            let b = fuse_global(&shuffled).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn partition_round_trips(c in 1usize..5, k in 1usize..5, rows in 1usize..4, w in 1usize..4, seed in 0u64..100) {
            let f = random_map(seed, c, k * rows, w);
            prop_assert_eq!(concat_parts(&partition(&f, k).unwrap()).unwrap(), f);
        }
    }
}
