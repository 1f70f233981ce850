//! The model `h = g(f(x))`: a small convolutional feature extractor `f`
//! and a single affine classifier `g`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::graph::{Activation, Graph, Var};
use crate::model::tensor::Tensor;
use crate::scalar::Scalar;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the square network input.
    pub image_size: usize,
    /// Output channels of each `conv -> norm -> activation -> 2x2 pool`
    /// stage; the last entry is the embedding width.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    /// Weight of the newest batch in the running normalization statistics.
    pub bn_momentum: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: vec![16, 32, 64],
            kernel_size: 3,
            activation: Activation::Relu,
            batch_norm: true,
            bn_momentum: 0.1,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("model.channels must be non-empty and positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("model.kernel_size must be odd".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        let div = 1usize << self.channels.len();
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "model.image_size {} must be divisible by {div} for {} pooling stages",
                self.image_size,
                self.channels.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("model.bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Extractor,
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    weight: usize,
    bias: usize,
    /// `(gamma, beta)` parameter indices and the running-stat buffer pair.
    norm: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers (recorded for the running update).
    Train,
    /// Frozen running statistics; rows are processed independently.
    Eval,
}

/// Trainable parameters plus non-trainable running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    params: Vec<NamedTensor<T>>,
    /// Running mean and variance per normalization layer, stored in pairs.
    buffers: Vec<NamedTensor<T>>,
    stages: Vec<Stage>,
    classifier: (usize, usize),
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for convolutions, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for the classifier.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(config)?;
        let k = config.kernel_size;
        let mut cin = 1;
        for (s, &cout) in config.channels.iter().enumerate() {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            let w = model.stages[s].weight;
            for v in model.params[w].value.data_mut() {
                *v = T::of(rng.random_range(-bound..bound));
            }
            cin = cout;
        }
        let bound = 1.0 / (config.embed_dim() as f64).sqrt();
        let (w, b) = model.classifier;
        for idx in [w, b] {
            for v in model.params[idx].value.data_mut() {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(model)
    }

    /// All weights zero, normalization scale one, running variance one.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut stages = Vec::new();
        let k = config.kernel_size;
        let mut cin = 1;
        let push = |params: &mut Vec<NamedTensor<T>>, name: String, group, value| {
            params.push(NamedTensor { name, group, value });
            params.len() - 1
        };
        for (s, &cout) in config.channels.iter().enumerate() {
            let weight = push(&mut params, format!("conv{s}.weight"), ParamGroup::Extractor, Tensor::zeros(vec![cout, cin, k, k]));
            let bias = push(&mut params, format!("conv{s}.bias"), ParamGroup::Extractor, Tensor::zeros(vec![cout]));
            let norm = if config.batch_norm {
                let gamma = push(&mut params, format!("norm{s}.gamma"), ParamGroup::Extractor, Tensor::filled(vec![cout], T::one()));
                let beta = push(&mut params, format!("norm{s}.beta"), ParamGroup::Extractor, Tensor::zeros(vec![cout]));
                buffers.push(NamedTensor {
                    name: format!("norm{s}.running_mean"),
                    group: ParamGroup::Extractor,
                    value: Tensor::zeros(vec![cout]),
                });
                buffers.push(NamedTensor {
                    name: format!("norm{s}.running_var"),
                    group: ParamGroup::Extractor,
                    value: Tensor::filled(vec![cout], T::one()),
                });
                Some((gamma, beta, buffers.len() - 2))
            } else {
                None
            };
            stages.push(Stage { weight, bias, norm });
            cin = cout;
        }
        let e = config.embed_dim();
        let w = push(&mut params, "classifier.weight".into(), ParamGroup::Classifier, Tensor::zeros(vec![config.num_classes, e]));
        let b = push(&mut params, "classifier.bias".into(), ParamGroup::Classifier, Tensor::zeros(vec![config.num_classes]));
        Ok(Self { config: config.clone(), params, buffers, stages, classifier: (w, b) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn classifier_indices(&self) -> (usize, usize) {
        self.classifier
    }

    /// Stacks images into an `N x 1 x S x S` batch.
    pub fn batch_tensor(&self, images: &[&GrayImage<T>]) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for (i, img) in images.iter().enumerate() {
            if img.shape() != (s, s) {
                return Err(Error::Dimension(format!(
                    "image {i} is {:?}, the model expects {s}x{s}",
                    img.shape()
                )));
            }
            data.extend_from_slice(img.pixels());
        }
        Tensor::new(vec![images.len(), 1, s, s], data)
    }

    fn bind(&self, graph: &mut Graph<T>, idx: usize) -> Var {
        graph.param(idx, self.params[idx].value.clone())
    }

    /// Feature extractor: returns an `N x embed_dim` node.
    pub fn forward_features(&self, graph: &mut Graph<T>, batch: Var, mode: Mode) -> Result<Var> {
        let s = graph.value(batch).shape().to_vec();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(Error::Dimension(format!("input batch {s:?}, expected N x 1 x {size} x {size}")));
        }
        let mut x = batch;
        for (l, stage) in self.stages.iter().enumerate() {
            let w = self.bind(graph, stage.weight);
            let b = self.bind(graph, stage.bias);
            x = graph.conv2d(x, w, b)?;
            if let Some((gamma, beta, buf)) = stage.norm {
                let g = self.bind(graph, gamma);
                let bt = self.bind(graph, beta);
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some((self.buffers[buf].value.data(), self.buffers[buf + 1].value.data())),
                };
                x = graph.batch_norm(l, x, g, bt, running, T::of(BN_EPS))?;
            }
            x = graph.activation(x, self.config.activation);
            x = graph.avg_pool2(x)?;
            if !graph.value(x).all_finite() {
                return Err(Error::numeric(format!("feature extractor stage {l}")));
            }
        }
        graph.global_avg_pool(x)
    }

    /// Classifier: `N x embed_dim` features to `N x C` logits.
    pub fn forward_logits(&self, graph: &mut Graph<T>, features: Var) -> Result<Var> {
        let width = graph.value(features).shape().get(1).copied();
        if width != Some(self.embed_dim()) {
            return Err(Error::Dimension(format!(
                "classifier expects width {}, got shape {:?}",
                self.embed_dim(),
                graph.value(features).shape()
            )));
        }
        let (w, b) = self.classifier;
        let wv = self.bind(graph, w);
        let bv = self.bind(graph, b);
        let out = graph.linear(features, wv, bv)?;
        if !graph.value(out).all_finite() {
            return Err(Error::numeric("classifier logits"));
        }
        Ok(out)
    }

    /// Evaluation-mode features, processed in chunks, no tape kept.
    pub fn features_eval(&self, images: &[&GrayImage<T>]) -> Result<Tensor<T>> {
        self.eval_chunks(images, false)
    }

    pub fn logits_eval(&self, images: &[&GrayImage<T>]) -> Result<Tensor<T>> {
        self.eval_chunks(images, true)
    }

    fn eval_chunks(&self, images: &[&GrayImage<T>], logits: bool) -> Result<Tensor<T>> {
        const CHUNK: usize = 64;
        let width = if logits { self.num_classes() } else { self.embed_dim() };
        let mut data = Vec::with_capacity(images.len() * width);
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(self.batch_tensor(chunk)?);
            let mut out = self.forward_features(&mut g, x, Mode::Eval)?;
            if logits {
                out = self.forward_logits(&mut g, out)?;
            }
            data.extend_from_slice(g.value(out).data());
        }
        Tensor::new(vec![images.len(), width], data)
    }

    /// Folds the batch statistics recorded in `graph` into the running
    /// statistics: `running = (1 - m) * running + m * batch`.
    pub fn update_running_stats(&mut self, graph: &Graph<T>) {
        let m = T::of(self.config.bn_momentum);
        for stats in graph.batch_stats() {
            let Some((_, _, buf)) = self.stages[stats.layer].norm else { continue };
            for (slot, batch) in [(buf, &stats.mean), (buf + 1, &stats.var)] {
                for (r, &b) in self.buffers[slot].value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &[NamedTensor<T>]| {
            v.iter()
                .map(|p| NamedTensor { name: p.name.clone(), group: p.group, value: p.value.cast() })
                .collect()
        };
        ModelParams {
            config: self.config.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            stages: self.stages.clone(),
            classifier: self.classifier,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { image_size: 16, channels: vec![4, 6], num_classes: 3, ..ModelConfig::default() }
    }

    fn images(n: usize, size: usize, seed: u64) -> Vec<GrayImage<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| GrayImage::from_fn(size, size, |_, _| rng.random())).collect()
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let mut model = ModelParams::<f64>::zeros(&small()).unwrap();
        for p in model.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let imgs = images(3, 16, 1);
        let refs: Vec<_> = imgs.iter().collect();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let x = g.constant(model.batch_tensor(&refs).unwrap());
            let f = model.forward_features(&mut g, x, mode).unwrap();
            assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn feature_and_logit_shapes() {
        let model = ModelParams::<f64>::init(&small(), 3).unwrap();
        let imgs = images(5, 16, 2);
        let refs: Vec<_> = imgs.iter().collect();
        assert_eq!(model.features_eval(&refs).unwrap().shape(), &[5, 6]);
        assert_eq!(model.logits_eval(&refs).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let model = ModelParams::<f64>::init(&small(), 4).unwrap();
        let imgs = images(6, 16, 3);
        let refs: Vec<_> = imgs.iter().collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<_> = perm.iter().map(|&i| &imgs[i]).collect();
        let a = model.features_eval(&refs).unwrap();
        let b = model.features_eval(&permuted).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(b.row(row), a.row(src));
        }
    }

    #[test]
    fn identity_classifier_and_bias_only() {
        let cfg = ModelConfig { channels: vec![4, 3], ..small() };
        let mut model = ModelParams::<f64>::zeros(&cfg).unwrap();
        let (w, b) = model.classifier_indices();
        {
            let wt = model.params_mut()[w].value.data_mut();
            for i in 0..3 {
                wt[i * 3 + i] = 1.0;
            }
        }
        let feats = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 3.0]]).unwrap();
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let l = model.forward_logits(&mut g, f).unwrap();
        assert_eq!(g.value(l), &feats.clone().reshaped(vec![2, 3]).unwrap());

        let mut zero = ModelParams::<f64>::zeros(&cfg).unwrap();
        zero.params_mut()[b].value.data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let mut g = Graph::new();
        let f = g.constant(feats);
        let l = zero.forward_logits(&mut g, f).unwrap();
        for i in 0..2 {
            assert_eq!(g.value(l).row(i), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn wrong_sizes_are_dimension_errors() {
        let model = ModelParams::<f64>::init(&small(), 0).unwrap();
        let bad = images(1, 8, 0);
        assert!(matches!(model.features_eval(&[&bad[0]]), Err(Error::Dimension(_))));
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(vec![2, 5]));
        assert!(matches!(model.forward_logits(&mut g, f), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_activation_names_the_stage() {
        let mut model = ModelParams::<f64>::init(&ModelConfig { batch_norm: false, ..small() }, 0).unwrap();
        model.params_mut()[0].value.data_mut()[0] = f64::INFINITY;
        let imgs = images(1, 16, 0);
        let err = model.features_eval(&[&imgs[0]]).unwrap_err();
        assert!(err.to_string().contains("stage 0"), "{err}");
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut model = ModelParams::<f64>::init(&small(), 1).unwrap();
        let imgs = images(4, 16, 5);
        let refs: Vec<_> = imgs.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(model.batch_tensor(&refs).unwrap());
        model.forward_features(&mut g, x, Mode::Train).unwrap();
        let before = model.buffers()[0].value.clone();
        model.update_running_stats(&g);
        let batch_mean = &g.batch_stats()[0].mean;
        for ((&r, &b0), &bm) in model.buffers()[0].value.data().iter().zip(before.data()).zip(batch_mean) {
            assert!((r - (0.9 * b0 + 0.1 * bm)).abs() < 1e-12);
        }
    }
}
