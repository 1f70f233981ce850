//! Loss terms: supervised cross-entropy, instance-to-prototype alignment,
//! thresholded pseudo-label consistency, and multi-sample similarity
//! consistency, plus their weighted composition.
//!
//! The value functions here run the same tape ops the trainer records, on
//! constant inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Graph, ModelParams, Tensor};
use crate::model::ops;
use crate::pool::AugmentationPool;
use crate::scalar::Scalar;

/// Mean softmax cross-entropy of `N x C` logits against integer labels.
pub fn supervised_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let n = labels.len();
    let v = g.softmax_cross_entropy(l, labels, &vec![T::one(); n], T::of(n.max(1) as f64))?;
    g.value(v).item()
}

/// One centroid per category in feature space (`C x embed_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    pub prototypes: Tensor<T>,
    pub source_counts: Vec<usize>,
}

impl<T: Scalar> PrototypeSet<T> {
    /// Mean feature row per label; every category must be represented.
    pub fn from_features(features: &Tensor<T>, labels: &[usize], num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} labels for features {:?}",
                labels.len(),
                features.shape()
            )));
        }
        let d = features.shape()[1];
        let mut sums = vec![T::zero(); num_classes * d];
        let mut counts = vec![0usize; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Parameter(format!("label {y} out of range for {num_classes} classes")));
            }
            counts[y] += 1;
            for (s, &v) in sums[y * d..(y + 1) * d].iter_mut().zip(features.row(i)) {
                *s = *s + v;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::State(format!("category {k} has no samples to build a prototype from")));
        }
        for (k, &c) in counts.iter().enumerate() {
            let inv = T::one() / T::of(c as f64);
            sums[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = *v * inv);
        }
        let prototypes = Tensor::new(vec![num_classes, d], sums)?;
        if !prototypes.all_finite() {
            return Err(Error::numeric("prototypes"));
        }
        Ok(Self { prototypes, source_counts: counts })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.row_len()
    }
}

/// Prototype per category: evaluation-mode mean feature of the pool entries.
pub fn compute_prototypes<T: Scalar>(pool: &AugmentationPool<T>, params: &ModelParams<T>) -> Result<PrototypeSet<T>> {
    let mut images = Vec::with_capacity(pool.total_len());
    let mut labels = Vec::with_capacity(pool.total_len());
    for (k, entries) in pool.classes().iter().enumerate() {
        if entries.is_empty() {
            return Err(Error::State(format!("augmentation pool category {k} is empty")));
        }
        for e in entries {
            images.push(&e.image);
            labels.push(k);
        }
    }
    let feats = params.features_eval(&images)?;
    PrototypeSet::from_features(&feats, &labels, pool.num_classes())
}

/// Softmax over categories of the negative Euclidean distance from
/// `feature` to each prototype.
pub fn proto_prob<T: Scalar>(feature: &[T], protos: &PrototypeSet<T>) -> Result<Vec<T>> {
    if feature.len() != protos.dim() {
        return Err(Error::Dimension(format!(
            "feature has {} entries, prototypes have {}",
            feature.len(),
            protos.dim()
        )));
    }
    if feature.iter().any(|v| !v.is_finite()) || !protos.prototypes.all_finite() {
        return Err(Error::numeric("proto_prob input"));
    }
    let c = protos.num_classes();
    let d = ops::pairwise_distances(feature, 1, protos.prototypes.data(), c, feature.len());
    let neg: Vec<T> = d.iter().map(|&v| -v).collect();
    Ok(ops::softmax_rows(&neg, 1, c))
}

/// Mean over source rows of `-log proto_prob(f(s_i))[y_i]`.
pub fn loss_pta<T: Scalar>(source_features: &Tensor<T>, source_labels: &[usize], protos: &PrototypeSet<T>) -> Result<T> {
    let mut g = Graph::new();
    let f = g.constant(source_features.clone());
    let v = g.prototype_cross_entropy(f, &protos.prototypes, source_labels)?;
    g.value(v).item()
}

/// Arg-max label (lowest index on ties) and its probability.
pub fn pseudo_label<T: Scalar>(probs_weak: &[T]) -> (usize, T) {
    probs_weak
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

/// Hard pseudo-labels, 0/1 acceptance weights and the accepted count for a
/// batch of weak-view distributions.
pub fn pseudo_targets<T: Scalar>(probs_weak: &Tensor<T>, sigma: f64) -> (Vec<usize>, Vec<T>, usize) {
    let mut targets = Vec::with_capacity(probs_weak.rows());
    let mut weights = Vec::with_capacity(probs_weak.rows());
    let mut accepted = 0;
    for i in 0..probs_weak.rows() {
        let (label, conf) = pseudo_label(probs_weak.row(i));
        targets.push(label);
        if conf.as_f64() >= sigma {
            weights.push(T::one());
            accepted += 1;
        } else {
            weights.push(T::zero());
        }
    }
    (targets, weights, accepted)
}

/// Sum over accepted rows of `CE(pseudo-label, softmax(strong logits))`,
/// divided by the batch size. Returns the loss and the accepted count.
pub fn loss_pl<T: Scalar>(probs_weak: &Tensor<T>, logits_strong: &Tensor<T>, sigma: f64) -> Result<(T, usize)> {
    if probs_weak.shape() != logits_strong.shape() {
        return Err(Error::Dimension(format!(
            "weak probabilities {:?} vs strong logits {:?}",
            probs_weak.shape(),
            logits_strong.shape()
        )));
    }
    let (targets, weights, accepted) = pseudo_targets(probs_weak, sigma);
    let mut g = Graph::new();
    let l = g.constant(logits_strong.clone());
    let v = g.softmax_cross_entropy(l, &targets, &weights, T::of(targets.len().max(1) as f64))?;
    Ok((g.value(v).item()?, accepted))
}

/// Pairwise Gaussian RBF similarities of a feature batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub values: Tensor<T>,
    pub beta_sq: T,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values.at2(i, j)
    }
}

pub fn similarity_matrix<T: Scalar>(features: &Tensor<T>, beta_sq: T) -> Result<SimilarityMatrix<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let h = g.rbf_similarity(f, beta_sq)?;
    Ok(SimilarityMatrix { values: g.value(h).clone(), beta_sq })
}

/// `(1/N^2) sum_ij (H_s(i,j) - H_w(i,j))^2`.
pub fn loss_msr<T: Scalar>(h_strong: &SimilarityMatrix<T>, h_weak: &SimilarityMatrix<T>) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(h_strong.values.clone());
    let b = g.constant(h_weak.values.clone());
    let v = g.mean_squared_diff(a, b)?;
    g.value(v).item()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pta: f64,
    pub lambda_cona: f64,
    pub lambda_msr: f64,
}

/// Raw component values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_wte: f64,
    pub l_pta: f64,
    pub l_pl: f64,
    pub l_msr: f64,
    pub accepted_pseudo_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_wte: f64,
    pub l_pta: f64,
    pub l_pl: f64,
    pub l_msr: f64,
    pub l_cona: f64,
    pub total: f64,
    pub accepted_pseudo_count: usize,
}

/// `l_cona = l_pl + lambda_msr * l_msr` and
/// `total = l_wte + lambda_pta * l_pta + lambda_cona * l_cona`.
pub fn total_loss(parts: LossParts, w: LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_wte", parts.l_wte), ("l_pta", parts.l_pta), ("l_pl", parts.l_pl), ("l_msr", parts.l_msr)] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss component {name} = {v}")));
        }
    }
    let l_cona = parts.l_pl + w.lambda_msr * parts.l_msr;
    let total = parts.l_wte + w.lambda_pta * parts.l_pta + w.lambda_cona * l_cona;
    Ok(LossBreakdown {
        l_wte: parts.l_wte,
        l_pta: parts.l_pta,
        l_pl: parts.l_pl,
        l_msr: parts.l_msr,
        l_cona,
        total,
        accepted_pseudo_count: parts.accepted_pseudo_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn protos(rows: &[&[f64]]) -> PrototypeSet<f64> {
        let p = t(rows);
        PrototypeSet { source_counts: vec![1; p.rows()], prototypes: p }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::zeros(vec![3, 10]);
        let l = supervised_loss(&logits, &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logit_gives_near_zero() {
        let l = supervised_loss(&t(&[&[1000.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn batch_mean_of_singles() {
        let a = t(&[&[0.3, -1.0, 2.0]]);
        let b = t(&[&[1.5, 0.2, -0.7]]);
        let both = t(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.7]]);
        let la = supervised_loss(&a, &[1]).unwrap();
        let lb = supervised_loss(&b, &[2]).unwrap();
        assert!((supervised_loss(&both, &[1, 2]).unwrap() - 0.5 * (la + lb)).abs() < 1e-12);
        assert!(matches!(supervised_loss(&a, &[3]), Err(Error::Parameter(_))));
    }

    #[test]
    fn equidistant_prototypes_split_evenly() {
        let p = protos(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let probs = proto_prob(&[0.0, 0.5], &p).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
        let l = loss_pta(&t(&[&[0.0, 0.5]]), &[1], &p).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn distance_ln3_gives_three_to_one() {
        let p = protos(&[&[0.0, 0.0], &[3f64.ln(), 0.0]]);
        let probs = proto_prob(&[0.0, 0.0], &p).unwrap();
        assert!((probs[0] - 0.75).abs() < 1e-12);
        assert!((probs[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn feature_at_own_prototype_with_far_others() {
        let p = protos(&[&[0.0, 0.0], &[100.0, 0.0], &[0.0, 100.0]]);
        let l = loss_pta(&t(&[&[0.0, 0.0]]), &[0], &p).unwrap();
        assert!(l < 1e-12);
        assert!(matches!(loss_pta(&t(&[&[0.0, 0.0]]), &[3], &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn proto_prob_rejects_non_finite() {
        let p = protos(&[&[0.0], &[1.0]]);
        assert!(matches!(proto_prob(&[f64::NAN], &p), Err(Error::Numeric { .. })));
        assert!(matches!(proto_prob(&[0.0, 1.0], &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_label(&[0.2, 0.7, 0.1]), (1, 0.7));
        assert_eq!(pseudo_label(&[0.5, 0.5]), (0, 0.5));
    }

    #[test]
    fn pl_all_rejected_is_zero() {
        let weak = t(&[&[0.5, 0.5], &[0.6, 0.4]]);
        let strong = t(&[&[3.0, -1.0], &[0.0, 2.0]]);
        assert_eq!(loss_pl(&weak, &strong, 0.95).unwrap(), (0.0, 0));
        assert!(matches!(loss_pl(&weak, &t(&[&[0.0, 0.0]]), 0.95), Err(Error::Dimension(_))));
    }

    #[test]
    fn pl_single_accepted_matching_strong_is_near_zero() {
        let weak = t(&[&[0.99, 0.01]]);
        let strong = t(&[&[500.0, 0.0]]);
        let (l, n) = loss_pl(&weak, &strong, 0.95).unwrap();
        assert_eq!(n, 1);
        assert!(l < 1e-12);
    }

    #[test]
    fn pl_divides_by_batch_size() {
        let weak = t(&[&[0.99, 0.01], &[0.5, 0.5]]);
        let strong = t(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let (l, n) = loss_pl(&weak, &strong, 0.95).unwrap();
        assert_eq!(n, 1);
        assert!((l - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_features_give_all_ones() {
        let h = similarity_matrix(&t(&[&[0.3, 0.1], &[0.3, 0.1], &[0.3, 0.1]]), 0.5).unwrap();
        assert!(h.values.data().iter().all(|&v| v == 1.0));
        assert!(matches!(similarity_matrix(&t(&[&[0.0]]), 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn squared_distance_two_beta_sq_gives_inverse_e() {
        // |f1 - f2|^2 = 1 = 2 * 0.5
        let h = similarity_matrix(&t(&[&[0.0, 0.0], &[1.0, 0.0]]), 0.5).unwrap();
        assert!((h.get(0, 1) - (-1f64).exp()).abs() < 1e-12);
        assert!((h.get(0, 1) - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn msr_examples() {
        let a = similarity_matrix(&t(&[&[0.0], &[0.0]]), 0.5).unwrap();
        let b = similarity_matrix(&t(&[&[0.0], &[1.0]]), 0.5).unwrap();
        assert_eq!(loss_msr(&a, &a).unwrap(), 0.0);
        let one = similarity_matrix(&t(&[&[4.0]]), 0.5).unwrap();
        assert_eq!(loss_msr(&one, &one).unwrap(), 0.0);
        let want = 2.0 * (1.0 - (-1f64).exp()).powi(2) / 4.0;
        assert!((loss_msr(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.199788).abs() < 1e-6);
        let three = similarity_matrix(&t(&[&[0.0], &[1.0], &[2.0]]), 0.5).unwrap();
        assert!(matches!(loss_msr(&a, &three), Err(Error::Dimension(_))));
    }

    #[test]
    fn total_loss_composition() {
        let zero = total_loss(LossParts::default(), LossWeights { lambda_pta: 0.1, lambda_cona: 1.0, lambda_msr: 1.0 }).unwrap();
        assert_eq!(zero.total, 0.0);
        let bad = LossParts { l_msr: f64::NAN, ..LossParts::default() };
        let err = total_loss(bad, LossWeights { lambda_pta: 0.1, lambda_cona: 1.0, lambda_msr: 1.0 }).unwrap_err();
        assert!(err.to_string().contains("l_msr"));
    }

    proptest! {
        #[test]
        fn breakdown_identity(wte in 0.0..5.0f64, pta in 0.0..5.0f64, pl in 0.0..5.0f64, msr in 0.0..1.0f64,
                              lp in 0.0..2.0f64, lc in 0.0..2.0f64, lm in 0.0..2.0f64) {
            let b = total_loss(LossParts { l_wte: wte, l_pta: pta, l_pl: pl, l_msr: msr, accepted_pseudo_count: 0 },
                               LossWeights { lambda_pta: lp, lambda_cona: lc, lambda_msr: lm }).unwrap();
            prop_assert!((b.l_cona - (b.l_pl + lm * b.l_msr)).abs() < 1e-9);
            prop_assert!((b.total - (b.l_wte + lp * b.l_pta + lc * b.l_cona)).abs() < 1e-9);
        }

        #[test]
        fn proto_prob_distribution_and_translation(
            feat in proptest::collection::vec(-3.0..3.0f64, 4),
            rows in proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, 4), 2..5),
            shift in proptest::collection::vec(-10.0..10.0f64, 4),
        ) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let p = protos(&refs);
            let probs = proto_prob(&feat, &p).unwrap();
            prop_assert!(probs.iter().all(|&v| v >= 0.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);

            let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let mrefs: Vec<&[f64]> = moved.iter().map(|r| r.as_slice()).collect();
            let mf: Vec<f64> = feat.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let q = proto_prob(&mf, &protos(&mrefs)).unwrap();
            for (a, b) in probs.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn similarity_structure_and_msr_sign(
            fa in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 3), 1..7),
            noise in proptest::collection::vec(-1.0..1.0f64, 21),
        ) {
            let ta = Tensor::from_rows(&fa).unwrap();
            let h = similarity_matrix(&ta, 0.5).unwrap();
            let n = h.size();
            for i in 0..n {
                prop_assert_eq!(h.get(i, i), 1.0);
                for j in 0..n {
                    prop_assert_eq!(h.get(i, j), h.get(j, i));
                    prop_assert!(h.get(i, j) > 0.0 && h.get(i, j) <= 1.0);
                }
            }
            let fb: Vec<Vec<f64>> = fa.iter().enumerate().map(|(i, r)| r.iter().enumerate().map(|(j, v)| v + noise[(i * 3 + j) % 21]).collect()).collect();
            let hb = similarity_matrix(&Tensor::from_rows(&fb).unwrap(), 0.5).unwrap();
            let l = loss_msr(&h, &hb).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, h == SimilarityMatrix { values: hb.values.clone(), beta_sq: 0.5 });
        }

        #[test]
        fn raising_sigma_never_accepts_more(
            rows in proptest::collection::vec(proptest::collection::vec(0.01..1.0f64, 3), 1..8),
            s1 in 0.0..1.0f64, s2 in 0.0..1.0f64,
        ) {
            let normed: Vec<Vec<f64>> = rows.iter().map(|r| { let z: f64 = r.iter().sum(); r.iter().map(|v| v / z).collect() }).collect();
            let weak = Tensor::from_rows(&normed).unwrap();
            let strong = Tensor::<f64>::zeros(weak.shape().to_vec());
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let (_, a_lo) = loss_pl(&weak, &strong, lo).unwrap();
            let (_, a_hi) = loss_pl(&weak, &strong, hi).unwrap();
            prop_assert!(a_hi <= a_lo);
        }
    }

    fn toy_model() -> ModelParams<f64> {
        let cfg = ModelConfig { image_size: 8, channels: vec![3, 4], num_classes: 2, ..ModelConfig::default() };
        ModelParams::init(&cfg, 5).unwrap()
    }

    fn img(seed: u64) -> GrayImage<f64> {
        GrayImage::from_fn(8, 8, |i, j| (((i * 7 + j * 3) as u64 + seed * 13) % 17) as f64 / 17.0)
    }

    #[test]
    fn prototypes_from_single_and_duplicate_entries() {
        let model = toy_model();
        let labeled = vec![(img(1), 0), (img(2), 1)];
        let pool = AugmentationPool::init(&labeled, 2, 8, 0.95).unwrap();
        let p = compute_prototypes(&pool, &model).unwrap();
        let f = model.features_eval(&[&img(1), &img(2)]).unwrap();
        assert_eq!(p.prototypes.row(0), f.row(0));
        assert_eq!(p.prototypes.row(1), f.row(1));

        let dup = vec![(img(1), 0), (img(1), 0), (img(2), 1)];
        let pool2 = AugmentationPool::init(&dup, 2, 8, 0.95).unwrap();
        let p2 = compute_prototypes(&pool2, &model).unwrap();
        for (a, b) in p2.prototypes.row(0).iter().zip(p.prototypes.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p2.source_counts, vec![2, 1]);
    }

    #[test]
    fn prototypes_match_explicit_mean() {
        let model = toy_model();
        let labeled = vec![(img(1), 0), (img(2), 1), (img(3), 0), (img(4), 1), (img(5), 0)];
        let pool = AugmentationPool::init(&labeled, 2, 8, 0.95).unwrap();
        let p = compute_prototypes(&pool, &model).unwrap();
        for (k, members) in [(0, vec![1, 3, 5]), (1, vec![2, 4])] {
            let mut acc = vec![0.0; model.embed_dim()];
            for &m in &members {
                let f = model.features_eval(&[&img(m)]).unwrap();
                for (a, v) in acc.iter_mut().zip(f.row(0)) {
                    *a += v;
                }
            }
            for (a, got) in acc.iter().zip(p.prototypes.row(k)) {
                assert!((a / members.len() as f64 - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_prototype_category_is_state_error() {
        let f = t(&[&[1.0], &[2.0]]);
        assert!(matches!(PrototypeSet::from_features(&f, &[0, 0], 2), Err(Error::State(_))));
    }
}
