//! Training objectives and their gradients.
//!
//! Every function is pure: it returns the scalar loss together with the
//! gradient on its inputs, and the caller routes those gradients into the
//! model through [`OutputGrads`].

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, OutputGrads};

/// Part vectors of one sample, `k x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbedding {
    pub parts: Array2<f64>,
    pub identity_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct LossReport {
    pub l_prt: f64,
    pub l_id_p: f64,
    pub l_id_g: f64,
    pub l_c: f64,
    pub l_ca: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_prt: f64, l_id_p: f64, l_id_g: f64, l_c: f64, l_ca: f64) -> Self {
        Self { l_prt, l_id_p, l_id_g, l_c, l_ca, total: l_prt + l_id_p + l_id_g + l_c + l_ca }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_prt, self.l_id_p, self.l_id_g, self.l_c, self.l_ca, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Unweighted sum of the five components, in logging order.
pub fn total_loss(components: [f64; 5]) -> LossReport {
    let [a, b, c, d, e] = components;
    LossReport::new(a, b, c, d, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Loss value with the gradient on the input it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<G> {
    pub loss: f64,
    pub grad: G,
}

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over parts of the per-part Euclidean distance between two `k x C`
/// part tuples.
pub fn part_mean_distance(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("part tuples {:?} and {:?} differ", x.dim(), y.dim())));
    }
    let k = x.nrows();
    if k == 0 {
        return Err(Error::Shape("part tuple has no parts".into()));
    }
    let sum: f64 = x.outer_iter().zip(y.outer_iter()).map(|(a, b)| euclid(a, b)).sum();
    Ok(sum / k as f64)
}

/// Hardest positive and negative per anchor under a precomputed distance
/// matrix. Ties go to the lowest index.
fn mine(dist: &Array2<f64>, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| dist[[a, j]] > dist[[a, p]]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| dist[[a, j]] < dist[[a, q]]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(q)) => Ok((p, q)),
                (None, _) => Err(Error::Contract(format!("anchor {a} has no positive in the batch"))),
                (_, None) => Err(Error::Contract(format!("anchor {a} has no negative in the batch"))),
            }
        })
        .collect()
}

fn check_batch(embeddings: &ArrayView3<f64>, labels: &[usize]) -> Result<()> {
    let (n, k, _) = embeddings.dim();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} embeddings but {} labels", labels.len())));
    }
    if k == 0 {
        return Err(Error::Shape("embeddings have no parts".into()));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding entry".into()));
    }
    Ok(())
}

/// Batch-hard triplet loss whose distance is the part-mean distance.
///
/// `embeddings` is `N x k x C`. Returns the reduced hinge and its gradient
/// with respect to `embeddings`. The gradient of a zero-length part
/// difference is taken as zero.
pub fn prt_loss(embeddings: ArrayView3<f64>, labels: &[usize], margin: f64, reduction: Reduction) -> Result<Scored<Array3<f64>>> {
    check_batch(&embeddings, labels)?;
    let (n, k, _) = embeddings.dim();
    let mut dist = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = part_mean_distance(embeddings.index_axis(Axis(0), i), embeddings.index_axis(Axis(0), j))?;
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mined = mine(&dist, labels)?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let mut loss = 0.0;
    let mut grad = Array3::zeros(embeddings.raw_dim());
    for (a, &(p, q)) in mined.iter().enumerate() {
        let hinge = dist[[a, p]] - dist[[a, q]] + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        for (other, sign) in [(p, 1.0), (q, -1.0)] {
            for i in 0..k {
                let diff = &embeddings.slice(ndarray::s![a, i, ..]) - &embeddings.slice(ndarray::s![other, i, ..]);
                let norm = diff.dot(&diff).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let g = diff * (sign * scale / (k as f64 * norm));
                let mut ga = grad.slice_mut(ndarray::s![a, i, ..]);
                ga += &g;
                let mut go = grad.slice_mut(ndarray::s![other, i, ..]);
                go -= &g;
            }
        }
    }
    Ok(Scored { loss: loss * scale, grad })
}

/// [`prt_loss`] over a list of per-sample part tuples.
pub fn prt_loss_of(batch: &[PartEmbedding], margin: f64) -> Result<f64> {
    let first = batch.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (k, c) = first.parts.dim();
    let mut stacked = Array3::zeros((batch.len(), k, c));
    for (s, e) in batch.iter().enumerate() {
        if e.parts.dim() != (k, c) {
            return Err(Error::Shape(format!("sample {s} has parts {:?}, expected {:?}", e.parts.dim(), (k, c))));
        }
        stacked.index_axis_mut(Axis(0), s).assign(&e.parts);
    }
    let labels: Vec<usize> = batch.iter().map(|e| e.identity_id).collect();
    Ok(prt_loss(stacked.view(), &labels, margin, Reduction::Sum)?.loss)
}

/// Batch-hard triplet applied to each part on its own, summed over parts.
pub fn classic_triplet_loss(embeddings: ArrayView3<f64>, labels: &[usize], margin: f64, reduction: Reduction) -> Result<Scored<Array3<f64>>> {
    check_batch(&embeddings, labels)?;
    let k = embeddings.dim().1;
    let mut loss = 0.0;
    let mut grad = Array3::zeros(embeddings.raw_dim());
    for i in 0..k {
        let part = embeddings.slice(ndarray::s![.., i..i + 1, ..]);
        let scored = prt_loss(part, labels, margin, reduction)?;
        loss += scored.loss;
        grad.slice_mut(ndarray::s![.., i..i + 1, ..]).assign(&scored.grad);
    }
    Ok(Scored { loss, grad })
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean over the batch of `-sum_j q_j log softmax(z)_j`; rows of `targets`
/// are probability vectors.
pub fn soft_cross_entropy(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<Scored<Array2<f64>>> {
    if logits.dim() != targets.dim() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", logits.dim(), targets.dim())));
    }
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let logp = log_softmax_rows(logits);
    let loss = -(&logp * targets).sum() / n as f64;
    let grad = (logp.mapv(f64::exp) - targets) / n as f64;
    Ok(Scored { loss, grad })
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<Scored<Array2<f64>>> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    let mut targets = Array2::zeros((n, classes));
    for (s, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label { label: l, num_classes: classes });
        }
        targets[[s, l]] = 1.0;
    }
    soft_cross_entropy(logits, &targets)
}

pub fn identity_ce(logits: &Array2<f64>, identity_labels: &[usize]) -> Result<Scored<Array2<f64>>> {
    cross_entropy(logits, identity_labels)
}

pub fn clothes_ce(logits: &Array2<f64>, clothes_labels: &[usize]) -> Result<Scored<Array2<f64>>> {
    cross_entropy(logits, clothes_labels)
}

/// Cross-entropy against a target spread uniformly over the clothes classes
/// of each sample's identity. `clothes_of_identity[id]` lists clothes labels.
pub fn clothes_adversarial(logits: &Array2<f64>, identity_labels: &[usize], clothes_of_identity: &[Vec<usize>]) -> Result<Scored<Array2<f64>>> {
    let (n, classes) = logits.dim();
    if identity_labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", identity_labels.len())));
    }
    let mut targets = Array2::zeros((n, classes));
    for (s, &id) in identity_labels.iter().enumerate() {
        let set = clothes_of_identity
            .get(id)
            .ok_or(Error::Label { label: id, num_classes: clothes_of_identity.len() })?;
        if set.is_empty() {
            return Err(Error::Integrity(format!("identity label {id} has no clothes classes")));
        }
        let w = 1.0 / set.len() as f64;
        for &c in set {
            if c >= classes {
                return Err(Error::Label { label: c, num_classes: classes });
            }
            targets[[s, c]] += w;
        }
    }
    soft_cross_entropy(logits, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletKind {
    Prt,
    Classic,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub reduction: Reduction,
    pub triplet: TripletKind,
    /// Whether the adversarial term is active this epoch.
    pub adversarial: bool,
}

/// Labels of one batch, already mapped to contiguous class indices.
#[derive(Debug, Clone, Copy)]
pub struct BatchLabels<'a> {
    pub identities: &'a [usize],
    pub clothes: &'a [usize],
    pub clothes_of_identity: &'a [Vec<usize>],
}

/// All objectives on one forward pass, with the gradients to feed back.
///
/// With quality weighting the triplet term reads the weighted part vectors;
/// without it, the pooled feature as a single part.
pub fn compute_losses(out: &ForwardOutput, labels: BatchLabels, cfg: &LossConfig) -> Result<(LossReport, OutputGrads)> {
    let mut grads = OutputGrads::default();
    let t2mgs = out.global_weighted.is_some();

    let l_prt = if cfg.triplet == TripletKind::Off {
        0.0
    } else {
        let input = if t2mgs {
            out.parts.clone()
        } else {
            out.global.clone().insert_axis(Axis(1))
        };
        let scored = match cfg.triplet {
            TripletKind::Prt => prt_loss(input.view(), labels.identities, cfg.margin, cfg.reduction)?,
            _ => classic_triplet_loss(input.view(), labels.identities, cfg.margin, cfg.reduction)?,
        };
        if t2mgs {
            grads.parts = Some(scored.grad);
        } else {
            grads.global = Some(scored.grad.index_axis_move(Axis(1), 0));
        }
        scored.loss
    };

    let id_g = identity_ce(&out.id_logits_g, labels.identities)?;
    grads.id_logits_g = Some(id_g.grad);

    let l_id_p = match &out.id_logits_p {
        Some(logits) => {
            let s = identity_ce(logits, labels.identities)?;
            grads.id_logits_p = Some(s.grad);
            s.loss
        }
        None => 0.0,
    };

    let c = clothes_ce(&out.clothes_logits, labels.clothes)?;
    grads.clothes_head = Some(c.grad);

    let l_ca = if cfg.adversarial {
        let s = clothes_adversarial(&out.clothes_logits, labels.identities, labels.clothes_of_identity)?;
        grads.clothes_features = Some(s.grad);
        s.loss
    } else {
        0.0
    };

    Ok((LossReport::new(l_prt, l_id_p, id_g.loss, c.loss, l_ca), grads))
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_batch(seed: u64, p: usize, kk: usize, k: usize, c: usize) -> (Array3<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Array3::from_shape_fn((p * kk, k, c), |_| rng.random_range(-1.0..1.0));
        let labels = (0..p * kk).map(|i| i / kk).collect();
        (emb, labels)
    }

    /// Enumerates every positive and negative per anchor.
    fn exhaustive_prt(emb: &Array3<f64>, labels: &[usize], margin: f64) -> f64 {
        let n = labels.len();
        let (_, k, c) = emb.dim();
        let d = |x: usize, y: usize| {
            let mut total = 0.0;
            for i in 0..k {
                let mut sq = 0.0;
                for ch in 0..c {
                    sq += (emb[[x, i, ch]] - emb[[y, i, ch]]).powi(2);
                }
                total += sq.sqrt();
            }
            total / k as f64
        };
        let mut loss = 0.0;
        for a in 0..n {
            let pos: Vec<f64> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).map(|j| d(a, j)).collect();
            let neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| d(a, j)).collect();
            let hp = pos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let hn = neg.iter().cloned().fold(f64::INFINITY, f64::min);
            loss += (hp - hn + margin).max(0.0);
        }
        loss
    }

    #[test]
    fn distance_examples() {
        let x = array![[3.0, 4.0], [1.0, 1.0]];
        let y = array![[0.0, 0.0], [1.0, 1.0]];
        assert_eq!(part_mean_distance(x.view(), y.view()).unwrap(), 2.5);
        assert_eq!(part_mean_distance(x.view(), x.view()).unwrap(), 0.0);
        let a = array![[1.0, 2.0, 2.0]];
        let b = array![[0.0, 0.0, 0.0]];
        assert_eq!(part_mean_distance(a.view(), b.view()).unwrap(), 3.0);
        assert!(matches!(part_mean_distance(x.view(), a.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_embeddings_give_four_margins() {
        let emb = Array3::from_elem((4, 6, 5), 0.7);
        let s = prt_loss(emb.view(), &[0, 0, 1, 1], 0.3, Reduction::Sum).unwrap();
        assert_eq!(s.loss, 4.0 * 0.3);
        assert!(s.grad.iter().all(|&g| g == 0.0));
        let m = prt_loss(emb.view(), &[0, 0, 1, 1], 0.3, Reduction::Mean).unwrap();
        assert!((m.loss - 0.3).abs() < 1e-15);
    }

    #[test]
    fn separated_clusters_give_zero() {
        let mut emb = Array3::zeros((4, 2, 3));
        emb.slice_mut(ndarray::s![2.., .., ..]).fill(10.0);
        emb[[1, 0, 0]] = 0.1;
        emb[[3, 1, 2]] = 10.1;
        let s = prt_loss(emb.view(), &[0, 0, 1, 1], 0.3, Reduction::Sum).unwrap();
        assert_eq!(s.loss, 0.0);
        assert!(s.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_exhaustive_oracle() {
        for seed in 0..20 {
            let (emb, labels) = random_batch(seed, 3, 3, 4, 8);
            let got = prt_loss(emb.view(), &labels, 0.3, Reduction::Sum).unwrap().loss;
            let want = exhaustive_prt(&emb, &labels, 0.3);
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn missing_positive_names_anchor() {
        let emb = Array3::zeros((3, 1, 2));
        match prt_loss(emb.view(), &[0, 1, 1], 0.3, Reduction::Sum) {
            Err(Error::Contract(msg)) => assert!(msg.contains("anchor 0"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(prt_loss(emb.view(), &[2, 2, 2], 0.3, Reduction::Sum), Err(Error::Contract(_))));
    }

    #[test]
    fn mining_ties_take_lowest_index() {
        let dist = Array2::from_elem((4, 4), 1.0);
        assert_eq!(mine(&dist, &[0, 0, 1, 1]).unwrap(), vec![(1, 2), (0, 2), (3, 0), (2, 0)]);
    }

    #[test]
    fn prt_gradient_matches_finite_differences() {
        let (emb, labels) = random_batch(7, 3, 2, 3, 8);
        let s = prt_loss(emb.view(), &labels, 0.3, Reduction::Sum).unwrap();
        let h = 1e-6;
        let mut numeric = Array3::zeros(emb.raw_dim());
        for idx in ndarray::indices(emb.raw_dim()) {
            let mut p = emb.clone();
            p[idx] += h;
            let mut m = emb.clone();
            m[idx] -= h;
            let lp = prt_loss(p.view(), &labels, 0.3, Reduction::Sum).unwrap().loss;
            let lm = prt_loss(m.view(), &labels, 0.3, Reduction::Sum).unwrap().loss;
            numeric[idx] = (lp - lm) / (2.0 * h);
        }
        let err = (&s.grad - &numeric).mapv(|v| v * v).sum().sqrt() / numeric.mapv(|v| v * v).sum().sqrt();
        assert!(s.loss > 0.0 && err < 1e-4, "relative error {err}");
    }

    #[test]
    fn classic_triplet_sums_parts() {
        let (emb, labels) = random_batch(3, 3, 3, 4, 5);
        let s = classic_triplet_loss(emb.view(), &labels, 0.3, Reduction::Sum).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let part = emb.slice(ndarray::s![.., i..i + 1, ..]).to_owned();
            want += exhaustive_prt(&part, &labels, 0.3);
        }
        assert!((s.loss - want).abs() < 1e-9);
        // with k=1 both losses agree
        let one = emb.slice(ndarray::s![.., 0..1, ..]);
        assert_eq!(
            classic_triplet_loss(one, &labels, 0.3, Reduction::Sum).unwrap(),
            prt_loss(one, &labels, 0.3, Reduction::Sum).unwrap()
        );
    }

    #[test]
    fn part_embedding_list_api() {
        let batch: Vec<PartEmbedding> = (0..4)
            .map(|i| PartEmbedding { parts: Array2::from_elem((2, 3), 1.0), identity_id: i / 2 })
            .collect();
        assert!((prt_loss_of(&batch, 0.3).unwrap() - 1.2).abs() < 1e-15);
    }

    fn recompute_ce(logits: &Array2<f64>, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (s, &l) in labels.iter().enumerate() {
            let row = logits.row(s);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[l].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Array2::zeros((3, 4));
        assert!((identity_ce(&uniform, &[0, 1, 3]).unwrap().loss - 4f64.ln()).abs() < 1e-12);
        assert!((clothes_ce(&Array2::zeros((2, 8)), &[0, 7]).unwrap().loss - 8f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let mut z = Array2::zeros((2, 4));
            z[[0, 1]] = scale;
            z[[1, 3]] = scale;
            let l = identity_ce(&z, &[1, 3]).unwrap().loss;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array2::from_shape_fn((8, 4), |_| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        assert!((identity_ce(&z, &labels).unwrap().loss - recompute_ce(&z, &labels)).abs() < 1e-9);
        let zc = Array2::from_shape_fn((6, 8), |_| rng.random_range(-3.0..3.0));
        let lc: Vec<usize> = (0..6).map(|i| (i * 3) % 8).collect();
        assert!((clothes_ce(&zc, &lc).unwrap().loss - recompute_ce(&zc, &lc)).abs() < 1e-9);

        assert!(matches!(
            identity_ce(&uniform, &[0, 4, 1]),
            Err(Error::Label { label: 4, num_classes: 4 })
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((5, 4), |_| rng.random_range(-2.0..2.0));
        let labels = [0, 3, 2, 2, 1];
        let s = cross_entropy(&z, &labels).unwrap();
        let h = 1e-6;
        for idx in ndarray::indices(z.raw_dim()) {
            let mut p = z.clone();
            p[idx] += h;
            let mut m = z.clone();
            m[idx] -= h;
            let num = (cross_entropy(&p, &labels).unwrap().loss - cross_entropy(&m, &labels).unwrap().loss) / (2.0 * h);
            assert!((num - s.grad[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn adversarial_cases() {
        let owners = vec![vec![2], vec![0, 1], vec![3, 4, 5]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array2::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0));

        // single clothes class reduces to plain cross-entropy
        let single = clothes_adversarial(&z, &[0, 0, 0, 0], &owners).unwrap();
        assert!((single.loss - recompute_ce(&z, &[2, 2, 2, 2])).abs() < 1e-12);

        let uniform = clothes_adversarial(&Array2::zeros((3, 6)), &[0, 1, 2], &owners).unwrap();
        assert!((uniform.loss - 6f64.ln()).abs() < 1e-12);

        let two = clothes_adversarial(&z, &[1, 1, 1, 1], &owners).unwrap();
        let mut want = 0.0;
        for s in 0..4 {
            let row = z.row(s);
            let zsum: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(0.5 * (row[0].exp() / zsum).ln() + 0.5 * (row[1].exp() / zsum).ln());
        }
        assert!((two.loss - want / 4.0).abs() < 1e-9);

        assert!(matches!(
            clothes_adversarial(&z, &[0, 1, 1, 1], &[vec![], vec![0]]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn report_sums() {
        assert_eq!(total_loss([0.0; 5]).total, 0.0);
        let r = total_loss([1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(r.total, 15.0);
        assert_eq!((r.l_prt, r.l_id_p, r.l_id_g, r.l_c, r.l_ca), (1.0, 2.0, 3.0, 4.0, 5.0));
    }

    fn triple(seed: u64) -> [Array2<f64>; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| Array2::from_shape_fn((3, 4), |_| rng.random_range(-5.0..5.0)))
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(seed in 0u64..10_000) {
            let [x, y, z] = triple(seed);
            let dxy = part_mean_distance(x.view(), y.view()).unwrap();
            let dyx = part_mean_distance(y.view(), x.view()).unwrap();
            let dxz = part_mean_distance(x.view(), z.view()).unwrap();
            let dyz = part_mean_distance(y.view(), z.view()).unwrap();
            prop_assert_eq!(dxy, dyx);
            prop_assert!(dxy >= 0.0);
            prop_assert!(dxz <= dxy + dyz + 1e-12);
        }

        #[test]
        fn distance_is_homogeneous(seed in 0u64..10_000, s in 0.01f64..100.0) {
            let [x, y, _] = triple(seed);
            let d = part_mean_distance(x.view(), y.view()).unwrap();
            let ds = part_mean_distance((&x * s).view(), (&y * s).view()).unwrap();
            prop_assert!((ds - s * d).abs() <= 1e-9 * (1.0 + s * d));
        }

        #[test]
        fn prt_ignores_batch_order(seed in 0u64..10_000) {
            let (emb, labels) = random_batch(seed, 3, 3, 2, 4);
            let mut order: Vec<usize> = (0..9).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let permuted = emb.select(Axis(0), &order);
            let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let a = prt_loss(emb.view(), &labels, 0.3, Reduction::Sum).unwrap().loss;
            let b = prt_loss(permuted.view(), &plabels, 0.3, Reduction::Sum).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn losses_nonnegative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((4, 5), |_| rng.random_range(-4.0..4.0));
            prop_assert!(cross_entropy(&z, &[0, 1, 2, 4]).unwrap().loss >= 0.0);
            let owners = vec![vec![0, 1], vec![2, 3, 4]];
            prop_assert!(clothes_adversarial(&z, &[0, 1, 1, 0], &owners).unwrap().loss >= 0.0);
        }
    }
}
