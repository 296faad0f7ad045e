//! Transfer-learning model: a frozen random-feature base and a trainable
//! dense softmax head.
//!
//! # Head parameter layout
//!
//! A head with layer sizes `[f, h1, ..., C]` is stored as one flat
//! [`ParamVector`]. Layers are laid out in order. Each layer stores its
//! `fan_in x fan_out` weight matrix row-major (row = input unit), followed by
//! its `fan_out` biases. Hidden layers use ReLU and the last layer is a
//! softmax over `C` logits.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::SeededRng;

/// Fixed random projection followed by `tanh`. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBase {
    projection: Array2<f64>,
    bias: Array1<f64>,
}

impl FrozenBase {
    /// Draws projection and bias from `N(0, 1/input_dim)`.
    pub fn random(input_dim: usize, feature_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 {
            return Err(Error::Argument(format!(
                "base dimensions must be positive (input {input_dim}, feature {feature_dim})"
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt())
            .map_err(|e| Error::Argument(e.to_string()))?;
        let projection = Array2::from_shape_simple_fn((input_dim, feature_dim), || normal.sample(rng));
        let bias = Array1::from_shape_simple_fn(feature_dim, || normal.sample(rng));
        Ok(Self { projection, bias })
    }

    pub fn from_parts(projection: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        Error::check_len(projection.ncols(), bias.len())?;
        if projection.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("base parameters must be finite".into()));
        }
        Ok(Self { projection, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    pub fn bias(&self) -> ArrayView1<'_, f64> {
        self.bias.view()
    }

    /// `tanh(inputs · projection + bias)`.
    pub fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Error::check_len(self.input_dim(), inputs.ncols())?;
        let mut out = inputs.dot(&self.projection);
        out += &self.bias;
        out.mapv_inplace(f64::tanh);
        Ok(out)
    }
}

/// Architecture of a dense softmax head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    /// `[fan_in, hidden..., classes]`.
    sizes: Vec<usize>,
}

impl HeadShape {
    pub fn new(feature_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {classes}")));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(feature_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        if sizes.contains(&0) {
            return Err(Error::Argument(format!("layer sizes must be positive: {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn fan_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("shape has at least two sizes")
    }

    /// `Σ (fan_in · fan_out + fan_out)` over layers.
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of each layer's `(weights, biases)` block in the flat vector.
    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let layer = Layer {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset += w[0] * w[1] + w[1];
            layer
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let end = self.offset + self.fan_in * self.fan_out;
        ArrayView2::from_shape((self.fan_in, self.fan_out), &params[self.offset..end])
            .expect("layer block matches shape")
    }

    fn biases<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.fan_in * self.fan_out;
        ArrayView1::from(&params[start..start + self.fan_out])
    }
}

/// A head architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    shape: HeadShape,
    params: ParamVector,
}

impl ClassifierHead {
    pub fn new(shape: HeadShape, params: ParamVector) -> Result<Self> {
        Error::check_len(shape.param_count(), params.len())?;
        Ok(Self { shape, params })
    }

    pub fn zeros(shape: HeadShape) -> Self {
        let params = ParamVector::zeros(shape.param_count());
        Self { shape, params }
    }

    /// Weights from `N(0, 0.01²)`, biases zero.
    pub fn init(shape: HeadShape, rng: &mut SeededRng) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut values = vec![0.0; shape.param_count()];
        for layer in shape.layers() {
            let end = layer.offset + layer.fan_in * layer.fan_out;
            for v in &mut values[layer.offset..end] {
                *v = normal.sample(rng);
            }
        }
        let params = ParamVector::new(values).expect("gaussian draws are finite");
        Self { shape, params }
    }

    pub fn shape(&self) -> &HeadShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.shape.clone(), params)
    }

    /// Row-wise class probabilities.
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Error::check_len(self.shape.fan_in(), features.ncols())?;
        let mut logits = forward_pass(&self.shape, self.params.as_slice(), features)
            .pop()
            .expect("at least one layer")
            .1;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Most probable class per row.
    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let probs = self.forward(features)?;
        Ok(probs.rows().into_iter().map(|r| argmax(r)).collect())
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &LabeledBatch<'_>) -> Result<f64> {
        self.check_batch(batch)?;
        let mut logits = forward_pass(&self.shape, self.params.as_slice(), batch.features)
            .pop()
            .expect("layer")
            .1;
        let loss = cross_entropy(&mut logits, batch.labels);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite ({loss})")));
        }
        Ok(loss)
    }

    /// Mean cross-entropy and its gradient (same layout as the parameters).
    pub fn loss_and_grad(&self, batch: &LabeledBatch<'_>) -> Result<(f64, ParamVector)> {
        self.check_batch(batch)?;
        let (loss, grad) = backprop(&self.shape, self.params.as_slice(), batch)?;
        Ok((loss, ParamVector::new(grad)?))
    }

    fn check_batch(&self, batch: &LabeledBatch<'_>) -> Result<()> {
        Error::check_len(self.shape.fan_in(), batch.features.ncols())?;
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.shape.classes()) {
            return Err(Error::Argument(format!(
                "label {y} out of range for {} classes",
                self.shape.classes()
            )));
        }
        Ok(())
    }
}

/// `(pre-activation, activation)` per layer; the last layer's activation
/// is left as raw logits.
fn forward_pass(
    shape: &HeadShape,
    params: &[f64],
    features: ArrayView2<'_, f64>,
) -> Vec<(Array2<f64>, Array2<f64>)> {
    let layers: Vec<Layer> = shape.layers().collect();
    let mut out: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let input = match out.last() {
            Some((_, a)) => a.view(),
            None => features,
        };
        let mut z = input.dot(&layer.weights(params));
        z += &layer.biases(params);
        let a = if li + 1 < layers.len() {
            z.mapv(|v| v.max(0.0))
        } else {
            z.clone()
        };
        out.push((z, a));
    }
    out
}

/// Backpropagation for a batch whose labels were already range-checked.
fn backprop(shape: &HeadShape, params: &[f64], batch: &LabeledBatch<'_>) -> Result<(f64, Vec<f64>)> {
    let layers: Vec<Layer> = shape.layers().collect();
    let mut acts = forward_pass(shape, params, batch.features);
    let n = batch.len() as f64;

    let (_, mut delta) = acts.pop().expect("layer");
    let loss = cross_entropy(&mut delta, batch.labels);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({loss})")));
    }
    // delta now holds probabilities; d(loss)/d(logits) = (p - onehot) / n
    for (mut row, &y) in delta.rows_mut().into_iter().zip(batch.labels) {
        row[y] -= 1.0;
    }
    delta /= n;

    let mut grad = vec![0.0; params.len()];
    for (li, layer) in layers.iter().enumerate().rev() {
        let input = if li == 0 {
            batch.features
        } else {
            acts[li - 1].1.view()
        };
        let gw = input.t().dot(&delta);
        let gb = delta.sum_axis(Axis(0));
        let w_end = layer.offset + layer.fan_in * layer.fan_out;
        for (dst, src) in grad[layer.offset..w_end].iter_mut().zip(gw.iter()) {
            *dst = *src;
        }
        for (dst, src) in grad[w_end..w_end + layer.fan_out].iter_mut().zip(gb.iter()) {
            *dst = *src;
        }
        if li > 0 {
            let mut upstream = delta.dot(&layer.weights(params).t());
            // ReLU passes gradient only where the pre-activation was positive.
            ndarray::Zip::from(&mut upstream)
                .and(&acts[li - 1].0)
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = upstream;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient is not finite".into()));
    }
    Ok((loss, grad))
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Turns `logits` into probabilities in place and returns the mean
/// negative log-likelihood of `labels`.
fn cross_entropy(logits: &mut Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total -= row[y] - max - log_sum;
        row.mapv_inplace(|v| (v - max - log_sum).exp());
    }
    total / labels.len() as f64
}

/// A borrowed mini-batch of features with labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> LabeledBatch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        Error::check_len(features.nrows(), labels.len())?;
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Features of a client's shard after passing through the frozen base.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Arc<Array2<f64>>,
    pub labels: Arc<Vec<usize>>,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        Error::check_len(features.nrows(), labels.len())?;
        Ok(Self {
            features: Arc::new(features),
            labels: Arc::new(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self) -> Result<LabeledBatch<'_>> {
        LabeledBatch::new(self.features.view(), &self.labels)
    }
}

/// Client-side optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam with fresh moment estimates for every local update.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl LocalTraining {
    pub fn sgd(epochs: usize, learning_rate: f64, batch_size: usize) -> Self {
        Self {
            epochs,
            learning_rate,
            batch_size,
            optimizer: Optimizer::Sgd,
        }
    }
}

/// Order in which one epoch visits the shard: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Runs `epochs` of mini-batch training on `data` starting from `head`.
///
/// Returns the trained parameters and the sample count `n_k = |shard|`.
/// Every epoch shuffles with `rng`; the final batch of an epoch may be
/// short.
pub fn local_update(
    head: &ClassifierHead,
    data: &FeatureSet,
    cfg: &LocalTraining,
    rng: &mut SeededRng,
) -> Result<(ParamVector, usize)> {
    if data.is_empty() {
        return Err(Error::Argument("cannot train on an empty shard".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(Error::Argument(format!(
            "learning rate {} must be finite and nonnegative",
            cfg.learning_rate
        )));
    }
    let mut params = head.params().as_slice().to_vec();
    let mut adam = match cfg.optimizer {
        Optimizer::Sgd => None,
        Optimizer::Adam => Some(AdamState::new(params.len())),
    };
    let mut xb = Array2::<f64>::zeros((0, data.features.ncols()));
    let mut yb = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        let order = epoch_order(data.len(), rng);
        for chunk in order.chunks(cfg.batch_size) {
            gather(data, chunk, &mut xb, &mut yb);
            let batch = LabeledBatch::new(xb.view(), &yb)?;
            head.check_batch(&batch)?;
            let (_, grad) = backprop(head.shape(), &params, &batch)?;
            match adam.as_mut() {
                None => {
                    for (w, g) in params.iter_mut().zip(&grad) {
                        *w -= cfg.learning_rate * g;
                    }
                }
                Some(state) => state.step(&mut params, &grad, cfg.learning_rate),
            }
        }
    }
    let params = ParamVector::new(params)?;
    Ok((params, data.len()))
}

fn gather(data: &FeatureSet, rows: &[usize], xb: &mut Array2<f64>, yb: &mut Vec<usize>) {
    let cols = data.features.ncols();
    if xb.nrows() != rows.len() {
        *xb = Array2::zeros((rows.len(), cols));
    }
    yb.clear();
    for (dst, &src) in rows.iter().enumerate() {
        xb.slice_mut(s![dst, ..]).assign(&data.features.row(src));
        yb.push(data.labels[src]);
    }
}

#[derive(Debug)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-7;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::Rng;

    use super::*;
    use crate::rng::Stream;

    fn rng(seed: u64) -> SeededRng {
        SeededRng::stream(seed, Stream::Test, &[])
    }

    fn random_head(shape: HeadShape, r: &mut SeededRng, scale: f64) -> ClassifierHead {
        let values = (0..shape.param_count())
            .map(|_| r.random_range(-scale..scale))
            .collect();
        ClassifierHead::new(shape, ParamVector::new(values).unwrap()).unwrap()
    }

    fn random_data(n: usize, f: usize, c: usize, r: &mut SeededRng) -> (Array2<f64>, Vec<usize>) {
        let x = Array2::from_shape_simple_fn((n, f), || r.random_range(-1.0..1.0));
        let y = (0..n).map(|_| r.random_range(0..c)).collect();
        (x, y)
    }

    /// Logit-forcing head: one feature, no hidden layer, weights chosen so
    /// the single input 1.0 produces `logits`.
    fn logit_head(logits: &[f64]) -> ClassifierHead {
        let shape = HeadShape::new(1, &[], logits.len()).unwrap();
        let mut values = logits.to_vec();
        values.extend(std::iter::repeat_n(0.0, logits.len()));
        ClassifierHead::new(shape, ParamVector::new(values).unwrap()).unwrap()
    }

    #[test]
    fn zero_base_gives_zero_features() {
        let base = FrozenBase::from_parts(Array2::zeros((3, 4)), Array1::zeros(4)).unwrap();
        let out = base.features(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((1, 4)));
    }

    #[test]
    fn identity_base_is_tanh() {
        let base = FrozenBase::from_parts(array![[1.0]], array![0.0]).unwrap();
        let out = base.features(array![[0.5]].view()).unwrap();
        assert!((out[[0, 0]] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((out[[0, 0]] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn base_rejects_wrong_width() {
        let base = FrozenBase::random(3, 5, &mut rng(1)).unwrap();
        assert!(matches!(
            base.features(Array2::zeros((2, 4)).view()),
            Err(Error::Dimension { expected: 3, found: 4 })
        ));
    }

    #[test]
    fn seeded_base_fixture() {
        let base = FrozenBase::random(2, 3, &mut SeededRng::new(7, 0)).unwrap();
        let out = base.features(array![[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]].view()).unwrap();
        let again = FrozenBase::random(2, 3, &mut SeededRng::new(7, 0)).unwrap();
        assert_eq!(base, again);
        // Direct evaluation of the definition on the drawn parameters.
        for (r, row) in [[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]].iter().enumerate() {
            for c in 0..3 {
                let z = row[0] * base.projection()[[0, c]]
                    + row[1] * base.projection()[[1, c]]
                    + base.bias()[c];
                assert!((out[[r, c]] - z.tanh()).abs() < 1e-15);
                assert!(out[[r, c]].abs() < 1.0);
            }
        }
    }

    #[test]
    fn head_param_count() {
        let shape = HeadShape::new(64, &[200, 100], 3).unwrap();
        assert_eq!(shape.param_count(), 64 * 200 + 200 + 200 * 100 + 100 + 100 * 3 + 3);
        assert!(HeadShape::new(4, &[], 1).is_err());
        assert!(HeadShape::new(4, &[0], 3).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = ClassifierHead::zeros(HeadShape::new(4, &[5], 3).unwrap());
        let (x, y) = random_data(6, 4, 3, &mut rng(2));
        let probs = head.forward(x.view()).unwrap();
        for p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let loss = head.loss(&LabeledBatch::new(x.view(), &y).unwrap()).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn forced_logits_softmax_and_loss() {
        let head = logit_head(&[10.0, 0.0, 0.0]);
        let x = array![[1.0]];
        let p = head.forward(x.view()).unwrap();
        // softmax([10,0,0]) = [1, e^-10, e^-10] / (1 + 2e^-10)
        let denom = 1.0 + 2.0 * (-10f64).exp();
        assert!((p[[0, 0]] - 1.0 / denom).abs() < 1e-15);
        assert!((p[[0, 1]] - (-10f64).exp() / denom).abs() < 1e-15);
        assert!((p[[0, 0]] - 0.99991).abs() < 1e-5);
        assert!((p[[0, 1]] - 4.54e-5).abs() < 1e-7);
        let loss = head.loss(&LabeledBatch::new(x.view(), &[0]).unwrap()).unwrap();
        assert!((loss - denom.ln()).abs() < 1e-15);
        assert!((loss - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut r = rng(3);
        for _ in 0..20 {
            let head = random_head(HeadShape::new(5, &[7], 4).unwrap(), &mut r, 3.0);
            let (x, _) = random_data(9, 5, 4, &mut r);
            let p = head.forward((&x * 20.0).view()).unwrap();
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn label_out_of_range() {
        let head = ClassifierHead::zeros(HeadShape::new(2, &[], 3).unwrap());
        let x = Array2::zeros((1, 2));
        let err = head.loss_and_grad(&LabeledBatch::new(x.view(), &[3]).unwrap());
        assert!(matches!(err, Err(Error::Argument(_))));
        assert!(LabeledBatch::new(x.view(), &[]).is_err());
    }

    fn central_difference(head: &ClassifierHead, batch: &LabeledBatch<'_>, h: f64) -> Vec<f64> {
        let base = head.params().as_slice().to_vec();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let lp = head.with_params(ParamVector::new(plus).unwrap()).unwrap().loss(batch).unwrap();
                let lm = head.with_params(ParamVector::new(minus).unwrap()).unwrap().loss(batch).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(4);
        let shapes = [
            HeadShape::new(4, &[], 3).unwrap(),
            HeadShape::new(3, &[4], 2).unwrap(),
            HeadShape::new(2, &[3, 3], 3).unwrap(),
        ];
        for case in 0..30 {
            let shape = shapes[case % shapes.len()].clone();
            assert!(shape.param_count() <= 50);
            let head = random_head(shape.clone(), &mut r, 1.0);
            let (x, y) = random_data(6, shape.fan_in(), shape.classes(), &mut r);
            let batch = LabeledBatch::new(x.view(), &y).unwrap();
            let (_, grad) = head.loss_and_grad(&batch).unwrap();
            let numeric = central_difference(&head, &batch, 1e-5);
            for (a, n) in grad.as_slice().iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel <= 1e-4, "case {case}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn small_sgd_step_does_not_increase_loss() {
        let mut r = rng(5);
        for _ in 0..20 {
            let head = random_head(HeadShape::new(4, &[6], 3).unwrap(), &mut r, 1.0);
            let (x, y) = random_data(12, 4, 3, &mut r);
            let batch = LabeledBatch::new(x.view(), &y).unwrap();
            let (before, grad) = head.loss_and_grad(&batch).unwrap();
            let stepped = crate::param::axpy(-1e-3, &grad, head.params()).unwrap();
            let after = head.with_params(stepped).unwrap().loss(&batch).unwrap();
            assert!(after <= before);
        }
    }

    fn shard(n: usize, f: usize, c: usize, seed: u64) -> FeatureSet {
        let (x, y) = random_data(n, f, c, &mut rng(seed));
        FeatureSet::new(x, y).unwrap()
    }

    #[test]
    fn zero_learning_rate_or_epochs_leave_head_unchanged() {
        let head = ClassifierHead::init(HeadShape::new(3, &[4], 2).unwrap(), &mut rng(6));
        let data = shard(10, 3, 2, 7);
        let (p, n) = local_update(&head, &data, &LocalTraining::sgd(3, 0.0, 4), &mut rng(8)).unwrap();
        assert_eq!(&p, head.params());
        assert_eq!(n, 10);
        let (p, _) = local_update(&head, &data, &LocalTraining::sgd(0, 0.5, 4), &mut rng(8)).unwrap();
        assert_eq!(&p, head.params());
    }

    #[test]
    fn one_full_batch_epoch_is_one_gradient_step() {
        let head = ClassifierHead::init(HeadShape::new(3, &[4], 2).unwrap(), &mut rng(9));
        let data = shard(10, 3, 2, 10);
        let (p, _) =
            local_update(&head, &data, &LocalTraining::sgd(1, 0.1, 10), &mut rng(11)).unwrap();
        let (_, grad) = head.loss_and_grad(&data.batch().unwrap()).unwrap();
        let expected = crate::param::axpy(-0.1, &grad, head.params()).unwrap();
        // Full-batch gradient is order independent up to summation rounding.
        assert!(crate::param::allclose(&p, &expected, 1e-12).unwrap());
    }

    #[test]
    fn local_update_is_deterministic_and_rejects_empty() {
        let head = ClassifierHead::init(HeadShape::new(3, &[], 2).unwrap(), &mut rng(12));
        let data = shard(17, 3, 2, 13);
        let cfg = LocalTraining::sgd(2, 0.05, 4);
        let a = local_update(&head, &data, &cfg, &mut rng(14)).unwrap();
        let b = local_update(&head, &data, &cfg, &mut rng(14)).unwrap();
        assert_eq!(a, b);
        let empty = FeatureSet::new(Array2::zeros((0, 3)), vec![]).unwrap();
        assert!(matches!(
            local_update(&head, &empty, &cfg, &mut rng(14)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn adam_reduces_loss() {
        let head = ClassifierHead::init(HeadShape::new(3, &[8], 2).unwrap(), &mut rng(15));
        let (x, _) = random_data(40, 3, 2, &mut rng(16));
        let y: Vec<usize> = x.rows().into_iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let data = FeatureSet::new(x, y).unwrap();
        let cfg = LocalTraining {
            optimizer: Optimizer::Adam,
            ..LocalTraining::sgd(20, 0.01, 8)
        };
        let (p, _) = local_update(&head, &data, &cfg, &mut rng(17)).unwrap();
        let before = head.loss(&data.batch().unwrap()).unwrap();
        let after = head.with_params(p).unwrap().loss(&data.batch().unwrap()).unwrap();
        assert!(after < before * 0.8, "{before} -> {after}");
    }
}
