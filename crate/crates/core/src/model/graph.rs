//! Tape-based reverse-mode differentiation over whole-tensor ops.
//!
//! A [`Graph`] records every op of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns one gradient per model parameter.

use crate::error::{Error, Result};
use crate::model::ops::{self, ConvDims};
use crate::model::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

enum Op<T> {
    Constant,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Activation { x: Var, kind: Activation },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SliceRows { x: Var, start: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, divisor: T, probs: Vec<T> },
    PrototypeCrossEntropy { features: Var, protos: Vec<T>, labels: Vec<usize>, probs: Vec<T>, dists: Vec<T> },
    Rbf { features: Var, beta_sq: T },
    MeanSquaredDiff { a: Var, b: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics observed by a normalization layer in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    num_params: usize,
    pub(crate) batch_stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), num_params: 0, batch_stats: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.batch_stats
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records parameter `index` of the model (for gradient routing).
    pub fn param(&mut self, index: usize, value: Tensor<T>) -> Var {
        self.num_params = self.num_params.max(index + 1);
        self.push(value, Op::Param(index))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::Dimension(format!("conv2d input {xs:?} with kernel {ws:?}")));
        }
        if self.value(b).len() != ws[0] {
            return Err(Error::Dimension(format!("conv2d bias length {} for {} filters", self.value(b).len(), ws[0])));
        }
        let d = ConvDims { n: xs[0], cin: xs[1], cout: ws[0], h: xs[2], w: xs[3], k: ws[2] };
        let out = ops::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &d);
        let k = d.k;
        let t = Tensor::new(vec![d.n, d.cout, d.h, d.w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, k }))
    }

    /// Per-channel normalization. `running` = `Some((mean, var))` uses fixed
    /// statistics; `None` uses (and records) the batch statistics.
    pub fn batch_norm(
        &mut self,
        layer: usize,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || self.value(gamma).len() != s[1] || self.value(beta).len() != s[1] {
            return Err(Error::Dimension(format!("batch_norm over {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let batch_stats = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => ops::channel_stats(self.value(x).data(), n, c, hw),
        };
        let (y, xhat, inv_std) = ops::batch_norm_forward(
            self.value(x).data(),
            n,
            c,
            hw,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        if batch_stats {
            self.batch_stats.push(BatchStats { layer, mean, var });
        }
        let t = Tensor::new(s, y)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let src = self.value(x);
        let data = match kind {
            Activation::Relu => src.data().iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Tanh => src.data().iter().map(|&v| v.tanh()).collect(),
        };
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Activation { x, kind })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Dimension(format!("avg_pool2 needs even spatial dims, got {s:?}")));
        }
        let y = ops::avg_pool2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let t = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], y)?;
        Ok(self.push(t, Op::AvgPool2 { x }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("global_avg_pool over {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let y = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new(vec![s[0], s[1]], y)?;
        Ok(self.push(t, Op::GlobalAvgPool { x }))
    }

    /// `y = x W^T + b` with `W` stored `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return Err(Error::Dimension(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let (n, d, c) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(n * c);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(n, d, c, T::one(), self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut y);
        let t = Tensor::new(vec![n, c], y)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    /// `sum_i weights[i] * CE(softmax(logits_i), targets[i]) / divisor`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T], divisor: T) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return Err(Error::Dimension(format!("{} targets for logits {s:?}", targets.len())));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Parameter(format!("label {t} out of range for {c} classes")));
        }
        let data = self.value(logits).data();
        let probs = ops::softmax_rows(data, n, c);
        let mut total = T::zero();
        for i in 0..n {
            if weights[i] != T::zero() {
                total = total + weights[i] * ops::cross_entropy_row(&data[i * c..(i + 1) * c], targets[i]);
            }
        }
        let t = Tensor::scalar(total / divisor);
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                divisor,
                probs,
            },
        ))
    }

    /// Mean negative log-probability of the true label under a softmax over
    /// negative Euclidean distances to fixed prototypes (`C x D`, detached).
    pub fn prototype_cross_entropy(&mut self, features: Var, protos: &Tensor<T>, labels: &[usize]) -> Result<Var> {
        let fs = self.value(features).shape().to_vec();
        let ps = protos.shape();
        if fs.len() != 2 || ps.len() != 2 || fs[1] != ps[1] || fs[0] != labels.len() {
            return Err(Error::Dimension(format!("features {fs:?}, prototypes {ps:?}, {} labels", labels.len())));
        }
        let (n, d, c) = (fs[0], fs[1], ps[0]);
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Parameter(format!("label {y} out of range for {c} prototypes")));
        }
        let dists = ops::pairwise_distances(self.value(features).data(), n, protos.data(), c, d);
        let neg: Vec<T> = dists.iter().map(|&v| -v).collect();
        let probs = ops::softmax_rows(&neg, n, c);
        let mut total = T::zero();
        for i in 0..n {
            total = total + ops::cross_entropy_row(&neg[i * c..(i + 1) * c], labels[i]);
        }
        let t = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            t,
            Op::PrototypeCrossEntropy {
                features,
                protos: protos.data().to_vec(),
                labels: labels.to_vec(),
                probs,
                dists,
            },
        ))
    }

    pub fn rbf_similarity(&mut self, features: Var, beta_sq: T) -> Result<Var> {
        let s = self.value(features).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("rbf over {s:?}")));
        }
        if !(beta_sq > T::zero()) {
            return Err(Error::Parameter(format!("beta_sq must be positive, got {beta_sq}")));
        }
        let m = ops::rbf_matrix(self.value(features).data(), s[0], s[1], beta_sq);
        let t = Tensor::new(vec![s[0], s[0]], m)?;
        Ok(self.push(t, Op::Rbf { features, beta_sq }))
    }

    /// Mean over all entries of `(a - b)^2`.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "mean_squared_diff of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let n = T::of(self.value(a).len().max(1) as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::MeanSquaredDiff { a, b }))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            total = total + w * self.value(v).item()?;
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }))
    }

    /// Reverse pass from scalar `loss`. Returns one gradient per parameter
    /// index seen by [`Graph::param`]; unreached parameters get zeros.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor<T>>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.num_params];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Conv2d { x, w, b, k } => {
                    let xs = self.value(*x).shape();
                    let d = ConvDims {
                        n: xs[0],
                        cin: xs[1],
                        cout: self.value(*w).shape()[0],
                        h: xs[2],
                        w: xs[3],
                        k: *k,
                    };
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g.data(), &d);
                    accumulate(&mut grads, self, *x, dx);
                    accumulate(&mut grads, self, *w, dw);
                    accumulate(&mut grads, self, *b, db);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let s = self.value(*x).shape();
                    let (dx, dg, dbeta) = ops::batch_norm_backward(
                        g.data(),
                        xhat,
                        inv_std,
                        self.value(*gamma).data(),
                        s[0],
                        s[1],
                        s[2] * s[3],
                        *batch_stats,
                    );
                    accumulate(&mut grads, self, *x, dx);
                    accumulate(&mut grads, self, *gamma, dg);
                    accumulate(&mut grads, self, *beta, dbeta);
                }
                Op::Activation { x, kind } => {
                    let dx = match kind {
                        Activation::Relu => self
                            .value(*x)
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                            .collect(),
                        Activation::Tanh => node
                            .value
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&y, &gv)| gv * (T::one() - y * y))
                            .collect(),
                    };
                    accumulate(&mut grads, self, *x, dx);
                }
                Op::AvgPool2 { x } => {
                    let s = self.value(*x).shape();
                    let dx = ops::avg_pool2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                    accumulate(&mut grads, self, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let s = self.value(*x).shape();
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::of(hw as f64);
                    let dx = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect();
                    accumulate(&mut grads, self, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (n, d) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let c = self.value(*w).shape()[0];
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, c, d, T::one(), g.data(), false, self.value(*w).data(), false, T::zero(), &mut dx);
                    let mut dw = vec![T::zero(); c * d];
                    T::gemm(c, n, d, T::one(), g.data(), true, self.value(*x).data(), false, T::zero(), &mut dw);
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(&mut grads, self, *x, dx);
                    accumulate(&mut grads, self, *w, dw);
                    accumulate(&mut grads, self, *b, db);
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let w = src.row_len();
                    let mut dx = vec![T::zero(); src.len()];
                    dx[start * w..start * w + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, self, *x, dx);
                }
                Op::SoftmaxCrossEntropy { logits, targets, weights, divisor, probs } => {
                    let c = self.value(*logits).shape()[1];
                    let scale = g.data()[0] / *divisor;
                    let mut dl = probs.clone();
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        dl[i * c + t] = dl[i * c + t] - T::one();
                        dl[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = *v * w * scale);
                    }
                    accumulate(&mut grads, self, *logits, dl);
                }
                Op::PrototypeCrossEntropy { features, protos, labels, probs, dists } => {
                    let f = self.value(*features);
                    let (n, d) = (f.shape()[0], f.shape()[1]);
                    let c = protos.len() / d;
                    let scale = g.data()[0] / T::of(n as f64);
                    let mut df = vec![T::zero(); n * d];
                    for i in 0..n {
                        let fi = f.row(i);
                        for k in 0..c {
                            let dist = dists[i * c + k];
                            if dist <= T::zero() {
                                continue; // zero subgradient at the kink
                            }
                            let onehot = if labels[i] == k { T::one() } else { T::zero() };
                            // d loss / d dist = -(p - y)
                            let coef = -(probs[i * c + k] - onehot) * scale / dist;
                            let hk = &protos[k * d..(k + 1) * d];
                            for j in 0..d {
                                df[i * d + j] = df[i * d + j] + coef * (fi[j] - hk[j]);
                            }
                        }
                    }
                    accumulate(&mut grads, self, *features, df);
                }
                Op::Rbf { features, beta_sq } => {
                    let f = self.value(*features);
                    let (n, d) = (f.shape()[0], f.shape()[1]);
                    let h = node.value.data();
                    let gd = g.data();
                    let mut df = vec![T::zero(); n * d];
                    let inv = T::one() / *beta_sq;
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let coef = -(gd[i * n + j] + gd[j * n + i]) * h[i * n + j] * inv;
                            for t in 0..d {
                                df[i * d + t] = df[i * d + t] + coef * (f.data()[i * d + t] - f.data()[j * d + t]);
                            }
                        }
                    }
                    accumulate(&mut grads, self, *features, df);
                }
                Op::MeanSquaredDiff { a, b } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let scale = T::of(2.0) * g.data()[0] / T::of(av.len().max(1) as f64);
                    let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| scale * (x - y)).collect();
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, self, *a, da);
                    accumulate(&mut grads, self, *b, db);
                }
                Op::WeightedSum { terms } => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, self, v, vec![w * g.data()[0]]);
                    }
                }
            }
        }

        Ok(param_grads
            .into_iter()
            .enumerate()
            .map(|(p, g)| g.unwrap_or_else(|| Tensor::zeros(self.param_shape(p))))
            .collect())
    }

    fn param_shape(&self, index: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .find(|n| matches!(n.op, Op::Param(p) if p == index))
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], graph: &Graph<T>, v: Var, g: Vec<T>) {
    if matches!(graph.nodes[v.0].op, Op::Constant) {
        return;
    }
    let shape = graph.value(v).shape().to_vec();
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, g).expect("gradient matches value shape")),
    }
}
