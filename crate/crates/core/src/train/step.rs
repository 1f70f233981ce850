use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::augment::{strong_augment, weak_augment};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::{compute_prototypes, pseudo_targets, total_loss, LossBreakdown, LossParts, PrototypeSet};
use crate::model::ops::softmax_rows;
use crate::model::{Graph, Mode, ModelParams, OptimState, Tensor, Var};
use crate::pool::AugmentationPool;
use crate::scalar::Scalar;
use crate::wavelet::{pwtda_augment, FilterPair};

/// Independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Augment = 1,
    Partner = 2,
    SourceOrder = 3,
    UnlabeledOrder = 4,
    Init = 5,
}

/// Generator for `(seed, stream, index)`; the same triple always yields the
/// same sequence, so no generator state needs to be carried between steps.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Raw (unaugmented) inputs of one iteration.
#[derive(Debug, Clone)]
pub struct StepBatch<'a, T> {
    pub source: Vec<(&'a GrayImage<T>, usize)>,
    pub labeled: Vec<(&'a GrayImage<T>, usize)>,
    pub unlabeled: Vec<&'a GrayImage<T>>,
}

/// Augmented network inputs laid out as
/// `[source | labeled target | unlabeled weak | unlabeled strong]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch<T> {
    pub images: Vec<GrayImage<T>>,
    pub source_labels: Vec<usize>,
    pub labeled_labels: Vec<usize>,
    pub num_unlabeled: usize,
}

impl<T: Scalar> PreparedBatch<T> {
    pub fn weak_unlabeled(&self) -> &[GrayImage<T>] {
        let start = self.source_labels.len() + self.labeled_labels.len();
        &self.images[start..start + self.num_unlabeled]
    }
}

/// Weak views of source and labeled target, weak and strong views of the
/// unlabeled batch, then wavelet mixing of each source view with a
/// same-category partner drawn from the pools.
pub fn prepare_batch<T: Scalar>(
    batch: &StepBatch<'_, T>,
    pools: &AugmentationPool<T>,
    config: &TrainConfig,
    iteration: u64,
) -> Result<PreparedBatch<T>> {
    let aug = &config.augment;
    let mut rng = stream_rng(config.seed ^ aug.rng_seed, Stream::Augment, iteration);
    let mut images = Vec::with_capacity(batch.source.len() + batch.labeled.len() + 2 * batch.unlabeled.len());
    for (img, _) in batch.source.iter().chain(&batch.labeled) {
        images.push(weak_augment(img, aug, &mut rng)?);
    }
    let mut strong = Vec::with_capacity(batch.unlabeled.len());
    for img in &batch.unlabeled {
        images.push(weak_augment(img, aug, &mut rng)?);
        strong.push(strong_augment(img, aug, &mut rng)?);
    }
    images.extend(strong);

    if config.pwtda {
        let filters = FilterPair::<T>::from_kind(config.wavelet);
        let alpha = T::of(config.alpha);
        let mut partner_rng = stream_rng(config.seed, Stream::Partner, iteration);
        for (i, &(_, label)) in batch.source.iter().enumerate() {
            let partner = pools.sample_partner(label, &mut partner_rng)?;
            images[i] = pwtda_augment(&images[i], partner, alpha, &filters)?;
        }
    }
    Ok(PreparedBatch {
        images,
        source_labels: batch.source.iter().map(|s| s.1).collect(),
        labeled_labels: batch.labeled.iter().map(|s| s.1).collect(),
        num_unlabeled: batch.unlabeled.len(),
    })
}

/// Hard pseudo-labels and 0/1 acceptance weights for the unlabeled rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargets<T> {
    pub labels: Vec<usize>,
    pub weights: Vec<T>,
    pub accepted: usize,
}

/// Tape for one step with handles on every loss term.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub l_wte: Var,
    pub l_pta: Option<Var>,
    pub l_pl: Option<Var>,
    pub l_msr: Option<Var>,
    pub total: Var,
    pub parts: LossParts,
    /// Detached softmax of the weak unlabeled logits.
    pub weak_probs: Option<Tensor<T>>,
    pub pseudo: Option<PseudoTargets<T>>,
}

/// Forward pass over the whole prepared batch in training mode and the
/// weighted loss. `pseudo` overrides the targets derived from the weak
/// view, which keeps them fixed under parameter perturbation.
pub fn build_loss_graph<T: Scalar>(
    params: &ModelParams<T>,
    prepared: &PreparedBatch<T>,
    prototypes: Option<&PrototypeSet<T>>,
    pseudo: Option<&PseudoTargets<T>>,
    config: &TrainConfig,
) -> Result<LossGraph<T>> {
    let ns = prepared.source_labels.len();
    let nl = prepared.labeled_labels.len();
    let nu = prepared.num_unlabeled;
    let refs: Vec<&GrayImage<T>> = prepared.images.iter().collect();
    let mut g = Graph::new();
    let x = g.constant(params.batch_tensor(&refs)?);
    let feats = params.forward_features(&mut g, x, Mode::Train).map_err(|e| e.context("forward pass"))?;
    let logits = params.forward_logits(&mut g, feats).map_err(|e| e.context("forward pass"))?;

    let sup_logits = g.slice_rows(logits, 0, ns + nl)?;
    let sup_labels: Vec<usize> = prepared.source_labels.iter().chain(&prepared.labeled_labels).copied().collect();
    let l_wte = g
        .softmax_cross_entropy(sup_logits, &sup_labels, &vec![T::one(); ns + nl], T::of((ns + nl).max(1) as f64))
        .map_err(|e| e.context("supervised loss"))?;

    let l_pta = match prototypes {
        Some(p) if ns > 0 => {
            let src = g.slice_rows(feats, 0, ns)?;
            Some(g.prototype_cross_entropy(src, &p.prototypes, &prepared.source_labels).map_err(|e| e.context("prototype loss"))?)
        }
        _ => None,
    };

    let (mut l_pl, mut l_msr, mut weak_probs, mut targets) = (None, None, None, None);
    if nu > 0 {
        let c = params.num_classes();
        let weak_logits = g.value(logits).slice_rows(ns + nl, nu)?;
        let probs = Tensor::new(vec![nu, c], softmax_rows(weak_logits.data(), nu, c))?;
        let t = match pseudo {
            Some(t) => t.clone(),
            None => {
                let (labels, weights, accepted) = pseudo_targets(&probs, config.sigma);
                PseudoTargets { labels, weights, accepted }
            }
        };
        let strong_logits = g.slice_rows(logits, ns + nl + nu, nu)?;
        l_pl = Some(
            g.softmax_cross_entropy(strong_logits, &t.labels, &t.weights, T::of(nu as f64))
                .map_err(|e| e.context("pseudo-label loss"))?,
        );
        let fw = g.slice_rows(feats, ns + nl, nu)?;
        let fs = g.slice_rows(feats, ns + nl + nu, nu)?;
        let hw = g.rbf_similarity(fw, T::of(config.beta_sq))?;
        let hs = g.rbf_similarity(fs, T::of(config.beta_sq))?;
        l_msr = Some(g.mean_squared_diff(hs, hw).map_err(|e| e.context("similarity loss"))?);
        weak_probs = Some(probs);
        targets = Some(t);
    }

    let lc = T::of(config.lambda_cona);
    let mut terms = vec![(l_wte, T::one())];
    if let Some(v) = l_pta {
        terms.push((v, T::of(config.lambda_pta)));
    }
    if let Some(v) = l_pl {
        terms.push((v, lc));
    }
    if let Some(v) = l_msr {
        terms.push((v, lc * T::of(config.lambda_msr)));
    }
    let total = g.weighted_sum(&terms)?;

    let read = |g: &Graph<T>, v: Option<Var>| -> Result<f64> { v.map(|v| g.value(v).item().map(|x| x.as_f64())).unwrap_or(Ok(0.0)) };
    let parts = LossParts {
        l_wte: read(&g, Some(l_wte))?,
        l_pta: read(&g, l_pta)?,
        l_pl: read(&g, l_pl)?,
        l_msr: read(&g, l_msr)?,
        accepted_pseudo_count: targets.as_ref().map_or(0, |t| t.accepted),
    };
    Ok(LossGraph { graph: g, l_wte, l_pta, l_pl, l_msr, total, parts, weak_probs, pseudo: targets })
}

/// Trainable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub optim: OptimState<T>,
    pub pools: AugmentationPool<T>,
    /// Number of completed steps.
    pub iteration: u64,
}

/// One full iteration: augmentation and wavelet mixing, prototypes from the
/// pools, all losses, pool insertion of confident weak views, backward pass
/// and parameter update.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, config: &TrainConfig, batch: &StepBatch<'_, T>) -> Result<LossBreakdown> {
    let iter = state.iteration;
    let prepared = prepare_batch(batch, &state.pools, config, iter).map_err(|e| e.context("augmentation"))?;
    let prototypes = if config.lambda_pta > 0.0 {
        Some(compute_prototypes(&state.pools, &state.params).map_err(|e| e.context("prototypes"))?)
    } else {
        None
    };
    let lg = build_loss_graph(&state.params, &prepared, prototypes.as_ref(), None, config)?;
    let breakdown = total_loss(lg.parts, config.loss_weights()).map_err(|e| e.context(format!("iteration {iter}")))?;

    if config.pool_insertion {
        if let Some(probs) = &lg.weak_probs {
            for (i, img) in prepared.weak_unlabeled().iter().enumerate() {
                let row: Vec<f64> = probs.row(i).iter().map(|p| p.as_f64()).collect();
                state.pools.try_add(img, &row, iter + 1);
            }
        }
    }

    let grads = lg.graph.backward(lg.total).map_err(|e| e.context("backward pass"))?;
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::numeric(format!("gradients at iteration {iter}")));
    }
    state.optim.sgd_step_scaled(&mut state.params, &grads, config.lr_schedule.factor(iter, config.iterations))?;
    state.params.update_running_stats(&lg.graph);
    state.iteration += 1;
    Ok(breakdown)
}
