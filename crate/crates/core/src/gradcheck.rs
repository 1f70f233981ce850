//! Central finite-difference check of the analytic gradients of every loss
//! term on a small double-precision model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::PrototypeSet;
use crate::model::{Activation, ModelConfig, ModelParams, Tensor};
use crate::train::{build_loss_graph, LossGraph, PreparedBatch, PseudoTargets, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Wte,
    Pta,
    Pl,
    Msr,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Wte, LossTerm::Pta, LossTerm::Pl, LossTerm::Msr, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Wte => "l_wte",
            LossTerm::Pta => "l_pta",
            LossTerm::Pl => "l_pl",
            LossTerm::Msr => "l_msr",
            LossTerm::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// gradients near zero are compared in absolute terms.
    pub floor: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            batch_size: 4,
            image_size: 8,
            channels: vec![4, 6],
            num_classes: 3,
            activation: Activation::Tanh,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: LossTerm,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub param_count: usize,
    pub accepted_pseudo: usize,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }
}

struct Fixture {
    model: ModelParams<f64>,
    batch: PreparedBatch<f64>,
    protos: PrototypeSet<f64>,
    pseudo: PseudoTargets<f64>,
    config: TrainConfig,
}

fn fixture(cfg: &GradcheckConfig) -> Result<Fixture> {
    let model_cfg = ModelConfig {
        image_size: cfg.image_size,
        channels: cfg.channels.clone(),
        kernel_size: 3,
        activation: cfg.activation,
        batch_norm: true,
        bn_momentum: 0.1,
        num_classes: cfg.num_classes,
    };
    let model = ModelParams::<f64>::init(&model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9c);
    let s = cfg.image_size;
    let n = cfg.batch_size;
    let images: Vec<GrayImage<f64>> = (0..4 * n).map(|_| GrayImage::from_fn(s, s, |_, _| rng.random::<f64>())).collect();
    let labels: Vec<usize> = (0..2 * n).map(|i| i % cfg.num_classes).collect();
    let batch = PreparedBatch {
        images,
        source_labels: labels[..n].to_vec(),
        labeled_labels: labels[n..].to_vec(),
        num_unlabeled: n,
    };

    let protos = Tensor::new(
        vec![cfg.num_classes, model.embed_dim()],
        (0..cfg.num_classes * model.embed_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let protos = PrototypeSet { prototypes: protos, source_counts: vec![1; cfg.num_classes] };

    let mut config = TrainConfig { model: model_cfg, ..TrainConfig::default() };
    config.sigma = 0.0;
    let probe = build_loss_graph(&model, &batch, Some(&protos), None, &config)?;
    let probs = probe.weak_probs.expect("unlabeled rows present");
    // accept the more confident half so both branches of the mask appear
    let mut conf: Vec<f64> = (0..n).map(|i| probs.row(i).iter().cloned().fold(0.0, f64::max)).collect();
    let pseudo_all = probe.pseudo.expect("pseudo targets");
    conf.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = conf[n / 2];
    let weights: Vec<f64> = (0..n)
        .map(|i| if probs.row(i).iter().cloned().fold(0.0, f64::max) >= cut { 1.0 } else { 0.0 })
        .collect();
    let accepted = weights.iter().filter(|&&w| w > 0.0).count();
    config.sigma = cut;
    let pseudo = PseudoTargets { labels: pseudo_all.labels, weights, accepted };
    Ok(Fixture { model, batch, protos, pseudo, config })
}

fn term_var(lg: &LossGraph<f64>, term: LossTerm) -> Result<crate::model::Var> {
    let v = match term {
        LossTerm::Wte => Some(lg.l_wte),
        LossTerm::Pta => lg.l_pta,
        LossTerm::Pl => lg.l_pl,
        LossTerm::Msr => lg.l_msr,
        LossTerm::Total => Some(lg.total),
    };
    v.ok_or_else(|| Error::State(format!("{} is not part of the loss graph", term.name())))
}

fn term_value(f: &Fixture, model: &ModelParams<f64>, term: LossTerm) -> Result<f64> {
    let lg = build_loss_graph(model, &f.batch, Some(&f.protos), Some(&f.pseudo), &f.config)?;
    lg.graph.value(term_var(&lg, term)?).item()
}

/// Compares analytic and central-difference gradients for every parameter
/// coordinate and every loss term.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let f = fixture(cfg)?;
    let lg = build_loss_graph(&f.model, &f.batch, Some(&f.protos), Some(&f.pseudo), &f.config)?;
    let mut terms = Vec::new();
    for term in LossTerm::ALL {
        let grads = lg.graph.backward(term_var(&lg, term)?)?;
        let mut worst = (0.0f64, String::new());
        let mut checked = 0;
        let mut model = f.model.clone();
        for (p, grad) in grads.iter().enumerate() {
            for k in 0..grad.len() {
                let orig = p_value(&f.model, p, k);
                set(&mut model, p, k, orig + cfg.epsilon);
                let plus = term_value(&f, &model, term)?;
                set(&mut model, p, k, orig - cfg.epsilon);
                let minus = term_value(&f, &model, term)?;
                set(&mut model, p, k, orig);
                let numeric = (plus - minus) / (2.0 * cfg.epsilon);
                let analytic = grad.data()[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
                if rel > worst.0 || worst.1.is_empty() {
                    worst = (rel, format!("{}[{k}]", f.model.params()[p].name));
                }
                checked += 1;
            }
        }
        terms.push(TermReport { term, max_rel_error: worst.0, worst_param: worst.1, checked, passed: worst.0 < cfg.tolerance });
    }
    Ok(GradcheckReport { param_count: f.model.param_count(), accepted_pseudo: f.pseudo.accepted, terms })
}

fn p_value(model: &ModelParams<f64>, p: usize, k: usize) -> f64 {
    model.params()[p].value.data()[k]
}

fn set(model: &mut ModelParams<f64>, p: usize, k: usize, v: f64) {
    model.params_mut()[p].value.data_mut()[k] = v;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toy_passes() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(report.param_count <= 5000);
        assert!(report.accepted_pseudo > 0 && report.accepted_pseudo < 4);
        for t in &report.terms {
            println!("{t:?}");
            assert!(t.passed, "{t:?}");
        }
    }
}
