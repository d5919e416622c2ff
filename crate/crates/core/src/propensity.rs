//! Propensity score estimation and inverse probability weights.
//!
//! The propensity score `e(x) = P(A = 1 | X = x)` is fit with a small
//! feed-forward network (rectified-linear hidden layers, sigmoid output)
//! trained by plain mini-batch gradient descent on the binary cross-entropy.
//! Everything is deterministic for a fixed seed: initialization, batch
//! shuffling, and the update schedule. Predictions are clamped away from 0
//! and 1 so the weights `1/e` and `1/(1 - e)` stay bounded.
//!
//! Model fitting consumes feature columns in canonical (name-sorted) order,
//! so reordering dataset columns cannot change any fitted value.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::rng::rng_from;
use crate::{Error, Result};

/// Training setup for [`fit_propensity`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weight matrices (biases are not penalized); keeps
    /// the over-parameterized net from drifting into the clamp region.
    pub weight_decay: f64,
    /// Predictions are clamped to `[clamp, 1 - clamp]`.
    pub clamp: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50],
            epochs: 200,
            batch: 64,
            learning_rate: 1e-2,
            weight_decay: 5e-2,
            clamp: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "clamp must lie in (0, 0.5), got {}",
                self.clamp
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("zero-width hidden layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layer {
    /// `out x in` weight matrix.
    weights: Array2<f64>,
    bias: Array1<f64>,
}

/// A fitted propensity model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Feature names in the order the model consumes them (name-sorted).
    input_names: Vec<String>,
    layers: Vec<Layer>,
    clamp: f64,
}

impl PropensityModel {
    /// Zero-initialized model, useful as a neutral baseline: its raw output
    /// is `sigmoid(0) = 0.5` everywhere.
    pub fn zeroed(input_names: Vec<String>, hidden: &[usize], clamp: f64) -> Self {
        let mut sizes = vec![input_names.len()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self {
            input_names,
            layers,
            clamp,
        }
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    /// Raw sigmoid output for a feature row given in the model's input order.
    fn raw(&self, x: &[f64]) -> f64 {
        let mut h: Vec<f64> = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.bias.len()];
            for (o, out) in next.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for (i, &v) in h.iter().enumerate() {
                    acc += layer.weights[[o, i]] * v;
                }
                *out = if li + 1 < self.layers.len() {
                    acc.max(0.0)
                } else {
                    acc
                };
            }
            h = next;
        }
        sigmoid(h[0])
    }

    /// Clamped propensity for a feature row given in the model's input order.
    pub fn predict_e(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_names.len(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("propensity input".into()));
        }
        Ok(self.raw(x).clamp(self.clamp, 1.0 - self.clamp))
    }

    /// Clamped propensities for every row of a dataset. Columns are matched
    /// by name, so the dataset's column order is irrelevant.
    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        if dataset.d() != self.input_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_names.len(),
                got: dataset.d(),
            });
        }
        let mapping: Vec<usize> = self
            .input_names
            .iter()
            .map(|name| {
                dataset
                    .names()
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| {
                        Error::InvalidDataset(format!("dataset lacks model input column {name:?}"))
                    })
            })
            .collect::<Result<_>>()?;
        let mut x = vec![0.0; mapping.len()];
        let mut out = Vec::with_capacity(dataset.n());
        for i in 0..dataset.n() {
            for (slot, &m) in x.iter_mut().zip(&mapping) {
                *slot = dataset.features()[[i, m]];
            }
            out.push(self.raw(&x).clamp(self.clamp, 1.0 - self.clamp));
        }
        Ok(out)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy from the logit.
#[inline]
fn bce_from_logit(z: f64, a: f64) -> f64 {
    z.max(0.0) - z * a + (-z.abs()).exp().ln_1p()
}

/// Fitted model plus the per-epoch full-sample training loss.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub model: PropensityModel,
    pub epoch_losses: Vec<f64>,
}

/// Fit the propensity model; see [`fit_propensity_traced`] for the loss trace.
pub fn fit_propensity(dataset: &Dataset, config: &TrainConfig) -> Result<PropensityModel> {
    Ok(fit_propensity_traced(dataset, config)?.model)
}

/// Fit `e(X)` by mini-batch gradient descent on the cross-entropy.
pub fn fit_propensity_traced(dataset: &Dataset, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    let treated: usize = dataset.treatment().iter().map(|&a| a as usize).sum();
    if treated == 0 || treated == dataset.n() {
        return Err(Error::SingleTreatmentClass);
    }

    let order = dataset.canonical_order();
    let input_names: Vec<String> = order.iter().map(|&m| dataset.names()[m].clone()).collect();
    let n = dataset.n();
    let d = dataset.d();
    let mut x = Array2::<f64>::zeros((n, d));
    for (col, &m) in order.iter().enumerate() {
        for i in 0..n {
            x[[i, col]] = dataset.features()[[i, m]];
        }
    }
    let a: Vec<f64> = dataset.treatment().iter().map(|&t| f64::from(t)).collect();

    let mut rng = rng_from(config.seed);
    let mut model = PropensityModel::zeroed(input_names, &config.hidden, config.clamp);
    for layer in &mut model.layers {
        let (fan_out, fan_in) = layer.weights.dim();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let all: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        // seeded Fisher-Yates shuffle
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        for chunk in indices.chunks(config.batch) {
            let (_, grads) = loss_and_grad(&model, &x, &a, chunk, config.weight_decay);
            for (layer, (gw, gb)) in model.layers.iter_mut().zip(grads) {
                layer.weights.scaled_add(-config.learning_rate, &gw);
                layer.bias.scaled_add(-config.learning_rate, &gb);
            }
        }
        let (loss, _) = loss_and_grad(&model, &x, &a, &all, config.weight_decay);
        epoch_losses.push(loss);
    }

    Ok(TrainTrace {
        model,
        epoch_losses,
    })
}

/// Mean cross-entropy over `rows` plus the L2 weight penalty, and the
/// gradient of that objective for every parameter.
fn loss_and_grad(
    model: &PropensityModel,
    x: &Array2<f64>,
    a: &[f64],
    rows: &[usize],
    weight_decay: f64,
) -> (f64, Vec<(Array2<f64>, Array1<f64>)>) {
    let b = rows.len();
    let depth = model.layers.len();

    // forward pass, keeping every activation
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(depth + 1);
    let mut input = Array2::<f64>::zeros((b, x.ncols()));
    for (bi, &i) in rows.iter().enumerate() {
        input.row_mut(bi).assign(&x.row(i));
    }
    acts.push(input);
    for (li, layer) in model.layers.iter().enumerate() {
        let prev = &acts[li];
        let mut out = prev.dot(&layer.weights.t());
        for mut row in out.outer_iter_mut() {
            row += &layer.bias;
        }
        if li + 1 < depth {
            out.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(out);
    }

    let logits = &acts[depth];
    let mut loss = 0.0;
    // delta holds dL/d(pre-activation) of the current layer
    let mut delta = Array2::<f64>::zeros((b, 1));
    for (bi, &i) in rows.iter().enumerate() {
        let z = logits[[bi, 0]];
        loss += bce_from_logit(z, a[i]);
        delta[[bi, 0]] = (sigmoid(z) - a[i]) / b as f64;
    }
    loss /= b as f64;

    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(depth);
    for _ in 0..depth {
        grads.push((Array2::zeros((0, 0)), Array1::zeros(0)));
    }
    for li in (0..depth).rev() {
        let mut gw = delta.t().dot(&acts[li]);
        if weight_decay > 0.0 {
            gw.scaled_add(weight_decay, &model.layers[li].weights);
            loss += 0.5
                * weight_decay
                * model.layers[li].weights.iter().map(|w| w * w).sum::<f64>();
        }
        let gb = delta.sum_axis(ndarray::Axis(0));
        if li > 0 {
            let mut prev_delta = delta.dot(&model.layers[li].weights);
            // ReLU gate: the pre-activation is positive exactly where the
            // stored activation is positive
            prev_delta.zip_mut_with(&acts[li], |d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev_delta;
        }
        grads[li] = (gw, gb);
    }
    (loss, grads)
}

/// Verify the backpropagated gradients against central finite differences
/// on the given dataset: returns the maximum relative error over all
/// parameters of a small randomly initialized network. A healthy
/// implementation stays below `1e-4`.
pub fn gradient_check_max_relative_error(
    dataset: &Dataset,
    hidden: &[usize],
    seed: u64,
) -> Result<f64> {
    let order = dataset.canonical_order();
    let n = dataset.n();
    let mut x = Array2::<f64>::zeros((n, dataset.d()));
    for (col, &m) in order.iter().enumerate() {
        for i in 0..n {
            x[[i, col]] = dataset.features()[[i, m]];
        }
    }
    let a: Vec<f64> = dataset.treatment().iter().map(|&t| f64::from(t)).collect();
    let rows: Vec<usize> = (0..n).collect();

    let mut model = PropensityModel::zeroed(
        order.iter().map(|&m| dataset.names()[m].clone()).collect(),
        hidden,
        0.01,
    );
    let mut rng = rng_from(seed);
    for layer in &mut model.layers {
        for w in layer.weights.iter_mut() {
            *w = rng.random_range(-0.8..0.8);
        }
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
    }

    let decay = 3e-3;
    let (_, grads) = loss_and_grad(&model, &x, &a, &rows, decay);
    let step = 1e-5;
    let mut worst = 0.0f64;
    for li in 0..model.layers.len() {
        let (rows_w, cols_w) = model.layers[li].weights.dim();
        for oi in 0..rows_w {
            for ii in 0..cols_w {
                let orig = model.layers[li].weights[[oi, ii]];
                model.layers[li].weights[[oi, ii]] = orig + step;
                let (up, _) = loss_and_grad(&model, &x, &a, &rows, decay);
                model.layers[li].weights[[oi, ii]] = orig - step;
                let (down, _) = loss_and_grad(&model, &x, &a, &rows, decay);
                model.layers[li].weights[[oi, ii]] = orig;
                let numeric = (up - down) / (2.0 * step);
                let analytic = grads[li].0[[oi, ii]];
                worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-6));
            }
            let orig = model.layers[li].bias[oi];
            model.layers[li].bias[oi] = orig + step;
            let (up, _) = loss_and_grad(&model, &x, &a, &rows, decay);
            model.layers[li].bias[oi] = orig - step;
            let (down, _) = loss_and_grad(&model, &x, &a, &rows, decay);
            model.layers[li].bias[oi] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[li].1[oi];
            worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-6));
        }
    }
    Ok(worst)
}

/// Inverse probability weights: `w0_i = 1(a_i = 0) / (1 - e_i)` and
/// `w1_i = 1(a_i = 1) / e_i`, with `e_i` clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpWeights {
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

impl IpWeights {
    fn from_propensities(treatment: &[u8], e: &[f64]) -> Self {
        let mut w0 = vec![0.0; treatment.len()];
        let mut w1 = vec![0.0; treatment.len()];
        for (i, (&a, &ei)) in treatment.iter().zip(e).enumerate() {
            if a == 1 {
                w1[i] = 1.0 / ei;
            } else {
                w0[i] = 1.0 / (1.0 - ei);
            }
        }
        Self { w0, w1 }
    }

    pub fn len(&self) -> usize {
        self.w0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w0.is_empty()
    }
}

/// Weights from a fitted model.
pub fn ipw_weights(model: &PropensityModel, dataset: &Dataset) -> Result<IpWeights> {
    let e = model.predict_dataset(dataset)?;
    Ok(IpWeights::from_propensities(dataset.treatment(), &e))
}

/// Weights from a known propensity function, for simulations where `e` is
/// available by construction. The function receives each feature row in
/// dataset column order; values are clamped like model predictions.
pub fn oracle_weights<F>(dataset: &Dataset, true_e: F, clamp: f64) -> Result<IpWeights>
where
    F: Fn(&[f64]) -> f64,
{
    if !(clamp > 0.0 && clamp < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "clamp must lie in (0, 0.5), got {clamp}"
        )));
    }
    let mut e = Vec::with_capacity(dataset.n());
    for i in 0..dataset.n() {
        let row = dataset.feature_row(i);
        let v = true_e(&row);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("propensity at row {i}")));
        }
        e.push(v.clamp(clamp, 1.0 - clamp));
    }
    Ok(IpWeights::from_propensities(dataset.treatment(), &e))
}
