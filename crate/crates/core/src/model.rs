//! MLP classifier with a cosine (or inner-product) logit head whose logits
//! are divided by a learned, input-dependent temperature.
//!
//! ```text
//! x -> [affine + ReLU] x (hidden.len() + 1) -> f   (penultimate, post-ReLU)
//! g_c = cos(w_c, f)                or  w_c . f + b_c
//! s   = w_t . f + b_t -> batch norm -> gamma * s_hat + beta -> sigmoid -> T
//! L   = g / T,  probs = softmax(L)
//! ```
//!
//! Gradients are derived by hand, including the path through train-mode
//! batch statistics and through both norms of the cosine head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset_io::{FeatureDump, LabeledDataset};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, sigmoid, softmax, Matrix};
use crate::par;
use crate::rng::{stream_rng, Stream};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const TEMPERATURE_FLOOR: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cosine,
    InnerProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub penultimate_dim: usize,
    pub num_classes: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.penultimate_dim == 0 || self.hidden_sizes.contains(&0) {
            return Err(Error::Domain("model dimensions must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Output widths of every affine+ReLU layer; the last is the penultimate layer.
    fn layer_widths(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_sizes);
        dims.push(self.penultimate_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Fully connected layer, `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureBranch {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub beta: f64,
    pub running_mean: f64,
    pub running_var: f64,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    /// `C x p` class weights.
    pub head_weight: Matrix,
    /// Present only for the inner-product head.
    pub head_bias: Option<Vec<f64>>,
    pub temperature: TemperatureBranch,
}

fn gaussian_matrix<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z })
        .collect();
    Matrix::from_parts(rows, cols, data)
}

/// He-style initialization (`N(0, 2/fan_in)`), zero biases, identity batch norm.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Init);
    let layers = cfg
        .layer_widths()
        .into_iter()
        .map(|(fan_in, out)| Dense {
            weight: gaussian_matrix(&mut rng, out, fan_in, (2.0 / fan_in as f64).sqrt()),
            bias: vec![0.0; out],
        })
        .collect();
    let p = cfg.penultimate_dim;
    let scale = (2.0 / p as f64).sqrt();
    let head_weight = gaussian_matrix(&mut rng, cfg.num_classes, p, scale);
    let head_bias = match cfg.head {
        HeadKind::Cosine => None,
        HeadKind::InnerProduct => Some(vec![0.0; cfg.num_classes]),
    };
    let weight = gaussian_matrix(&mut rng, 1, p, scale).into_data();
    Ok(ModelParams {
        layers,
        head_weight,
        head_bias,
        temperature: TemperatureBranch {
            weight,
            bias: 0.0,
            gamma: 1.0,
            beta: 0.0,
            running_mean: 0.0,
            running_var: 1.0,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        },
    })
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn penultimate_dim(&self) -> usize {
        self.head_weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head_weight.rows()
    }

    pub fn head_kind(&self) -> HeadKind {
        if self.head_bias.is_some() {
            HeadKind::InnerProduct
        } else {
            HeadKind::Cosine
        }
    }

    /// Trainable parameter count, optionally excluding the temperature branch.
    pub fn trainable_count(&self, with_temperature: bool) -> usize {
        let body: usize = self
            .layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum();
        let head = self.head_weight.data().len() + self.head_bias.as_ref().map_or(0, Vec::len);
        let temp = if with_temperature {
            self.temperature.weight.len() + 3
        } else {
            0
        };
        body + head + temp
    }

    /// Non-trainable buffers (batch-norm running statistics).
    pub fn buffer_count(&self) -> usize {
        2
    }

    /// Every trainable group in a fixed order shared with [`Gradients::groups`].
    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.data_mut()));
            out.push((format!("layer{i}.bias"), &mut l.bias));
        }
        out.push(("head.weight".into(), self.head_weight.data_mut()));
        if let Some(b) = self.head_bias.as_mut() {
            out.push(("head.bias".into(), b));
        }
        let t = &mut self.temperature;
        out.push(("temperature.weight".into(), &mut t.weight));
        out.push(("temperature.bias".into(), std::slice::from_mut(&mut t.bias)));
        out.push(("temperature.gamma".into(), std::slice::from_mut(&mut t.gamma)));
        out.push(("temperature.beta".into(), std::slice::from_mut(&mut t.beta)));
        out
    }

    /// Checks every shape against `cfg` and every value for finiteness.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let widths = cfg.layer_widths();
        if widths.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "config has {} layers, params {}",
                widths.len(),
                self.layers.len()
            )));
        }
        for (i, ((fan_in, out), l)) in widths.iter().zip(&self.layers).enumerate() {
            if l.weight.shape() != (*out, *fan_in) || l.bias.len() != *out {
                return Err(Error::Dimension(format!("layer {i} shape mismatch")));
            }
        }
        let (c, p) = (cfg.num_classes, cfg.penultimate_dim);
        if self.head_weight.shape() != (c, p) {
            return Err(Error::Dimension("head weight shape mismatch".into()));
        }
        match (cfg.head, &self.head_bias) {
            (HeadKind::Cosine, None) => {}
            (HeadKind::InnerProduct, Some(b)) if b.len() == c => {}
            _ => return Err(Error::Dimension("head bias inconsistent with head kind".into())),
        }
        let t = &self.temperature;
        if t.weight.len() != p {
            return Err(Error::Dimension("temperature weight length mismatch".into()));
        }
        let scalars = [t.bias, t.gamma, t.beta, t.running_mean, t.running_var, t.eps, t.momentum];
        let finite = scalars.iter().all(|v| v.is_finite())
            && t.weight.iter().all(|v| v.is_finite())
            && self.layers.iter().all(|l| l.bias.iter().all(|v| v.is_finite()))
            && self.head_bias.iter().flatten().all(|v| v.is_finite());
        if !finite || t.running_var < 0.0 || t.eps <= 0.0 {
            return Err(Error::Domain("non-finite or invalid parameter value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything computed by [`forward`] that [`backward`] needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    fingerprint: u64,
    /// Pre-activations per layer.
    pub pre: Vec<Matrix>,
    /// Post-ReLU activations per layer; the last is the penultimate `f`.
    pub post: Vec<Matrix>,
    pub raw_logits: Matrix,
    pub temp: TemperatureTrace,
    pub tempered_logits: Matrix,
    pub probs: Matrix,
}

#[derive(Debug, Clone)]
pub struct TemperatureTrace {
    /// `w_t . f + b_t` per row.
    pub pre: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Sigmoid output before the floor clamp.
    pub sigmoid: Vec<f64>,
    pub temperature: Vec<f64>,
    /// Mean and biased variance used for normalization.
    pub mean: f64,
    pub var: f64,
}

impl ForwardTrace {
    pub fn penultimate(&self) -> &Matrix {
        self.post.last().expect("at least one layer")
    }

    pub fn temperature(&self) -> &[f64] {
        &self.temp.temperature
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn fingerprint(m: &Matrix) -> u64 {
    // FNV-1a over shape and bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    eat(m.rows() as u64);
    eat(m.cols() as u64);
    m.data().iter().for_each(|v| eat(v.to_bits()));
    h
}

/// `out[i] = relu?(W x_i + b)` with a fixed summation order.
fn affine(x: &Matrix, layer: &Dense) -> Matrix {
    let (n, k) = x.shape();
    let out_dim = layer.weight.rows();
    let mut out = vec![0.0; n * out_dim];
    par::for_each_chunk_mut(&mut out, out_dim.max(1), |i, row| {
        let xi = &x.data()[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = layer.bias[j] + dot(layer.weight.row(j), xi);
        }
    });
    Matrix::from_parts(n, out_dim, out)
}

fn relu(m: &Matrix) -> Matrix {
    Matrix::from_parts(m.rows(), m.cols(), m.data().iter().map(|&v| v.max(0.0)).collect())
}

/// Cosine similarity with the zero-norm guard `cos = 0`.
pub fn cosine(w: &[f64], f: &[f64]) -> f64 {
    let (nw, nf) = (norm(w), norm(f));
    if nw == 0.0 || nf == 0.0 {
        0.0
    } else {
        (dot(w, f) / (nw * nf)).clamp(-1.0, 1.0)
    }
}

/// Raw logits of `features` under `head_weight` (and bias for the inner-product head).
pub fn head_logits(features: &Matrix, head_weight: &Matrix, head_bias: Option<&[f64]>) -> Result<Matrix> {
    if features.cols() != head_weight.cols() {
        return Err(Error::Dimension(format!(
            "penultimate width {} vs head width {}",
            features.cols(),
            head_weight.cols()
        )));
    }
    let c = head_weight.rows();
    let w_norms: Vec<f64> = head_weight.iter_rows().map(norm).collect();
    let mut out = vec![0.0; features.rows() * c];
    par::for_each_chunk_mut(&mut out, c.max(1), |i, row| {
        let f = features.row(i);
        match head_bias {
            Some(b) => {
                for (j, o) in row.iter_mut().enumerate() {
                    *o = dot(head_weight.row(j), f) + b[j];
                }
            }
            None => {
                let nf = norm(f);
                for (j, o) in row.iter_mut().enumerate() {
                    let nw = w_norms[j];
                    *o = if nw == 0.0 || nf == 0.0 {
                        0.0
                    } else {
                        (dot(head_weight.row(j), f) / (nw * nf)).clamp(-1.0, 1.0)
                    };
                }
            }
        }
    });
    Ok(Matrix::from_parts(features.rows(), c, out))
}

fn temperature_forward(t: &TemperatureBranch, features: &Matrix, mode: Mode) -> TemperatureTrace {
    let pre: Vec<f64> = features.iter_rows().map(|f| dot(&t.weight, f) + t.bias).collect();
    let n = pre.len() as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mean = pre.iter().sum::<f64>() / n;
            let var = pre.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            (mean, var)
        }
        Mode::Eval => (t.running_mean, t.running_var),
    };
    let inv_std = 1.0 / (var + t.eps).sqrt();
    // a constant batch gives pre == mean exactly, hence normalized 0
    let normalized: Vec<f64> = pre.iter().map(|s| (s - mean) * inv_std).collect();
    let sigmoid: Vec<f64> = normalized.iter().map(|z| sigmoid(t.gamma * z + t.beta)).collect();
    let temperature = sigmoid.iter().map(|s| s.max(TEMPERATURE_FLOOR)).collect();
    TemperatureTrace {
        pre,
        normalized,
        sigmoid,
        temperature,
        mean,
        var,
    }
}

/// Eval-mode temperature for each row of penultimate features.
pub fn temperatures(params: &ModelParams, features: &Matrix) -> Vec<f64> {
    temperature_forward(&params.temperature, features, Mode::Eval).temperature
}

/// Divides each logit row by its temperature and applies a row softmax.
pub fn temper(raw: &Matrix, temperature: &[f64]) -> Result<(Matrix, Matrix)> {
    if raw.rows() != temperature.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} temperatures",
            raw.rows(),
            temperature.len()
        )));
    }
    let c = raw.cols();
    let mut tempered = raw.clone();
    for (row, &t) in tempered.data_mut().chunks_mut(c.max(1)).zip(temperature) {
        row.iter_mut().for_each(|v| *v /= t);
    }
    let mut probs = Vec::with_capacity(raw.data().len());
    for row in tempered.iter_rows() {
        probs.extend(softmax(row)?);
    }
    Ok((tempered, Matrix::from_parts(raw.rows(), c, probs)))
}

pub fn forward(params: &ModelParams, batch: &Matrix, mode: Mode) -> Result<ForwardTrace> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    if mode == Mode::Train && batch.rows() < 2 {
        return Err(Error::Contract(
            "train-mode forward needs at least 2 rows for batch statistics".into(),
        ));
    }
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let a = affine(post.last().unwrap_or(batch), layer);
        post.push(relu(&a));
        pre.push(a);
    }
    let features = post.last().expect("at least one layer");
    let raw_logits = head_logits(features, &params.head_weight, params.head_bias.as_deref())?;
    let temp = temperature_forward(&params.temperature, features, mode);
    let (tempered_logits, probs) = temper(&raw_logits, &temp.temperature)?;
    Ok(ForwardTrace {
        mode,
        fingerprint: fingerprint(batch),
        pre,
        post,
        raw_logits,
        temp,
        tempered_logits,
        probs,
    })
}

/// Train-mode forward that also folds the batch statistics into the running
/// statistics: `running <- (1 - m) * running + m * batch`.
pub fn forward_train(params: &mut ModelParams, batch: &Matrix) -> Result<ForwardTrace> {
    let trace = forward(params, batch, Mode::Train)?;
    update_running_stats(params, &trace);
    Ok(trace)
}

pub fn update_running_stats(params: &mut ModelParams, trace: &ForwardTrace) {
    let t = &mut params.temperature;
    let m = t.momentum;
    t.running_mean = (1.0 - m) * t.running_mean + m * trace.temp.mean;
    t.running_var = (1.0 - m) * t.running_var + m * trace.temp.var;
}

/// Mean cross-entropy; probabilities are floored at 1e-300 before the log.
pub fn loss_ce(trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    check_labels(&trace.probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -trace.probs.get(i, y).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::Domain(format!("label {y} outside [0, {})", probs.cols())));
    }
    Ok(())
}

/// Gradients with the same shapes as the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub head_weight: Matrix,
    pub head_bias: Option<Vec<f64>>,
    pub temp_weight: Vec<f64>,
    pub temp_bias: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Gradients {
            layers: p
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            head_weight: Matrix::zeros(p.head_weight.rows(), p.head_weight.cols()),
            head_bias: p.head_bias.as_ref().map(|b| vec![0.0; b.len()]),
            temp_weight: vec![0.0; p.temperature.weight.len()],
            temp_bias: 0.0,
            gamma: 0.0,
            beta: 0.0,
        }
    }

    /// Same order as [`ModelParams::groups_mut`].
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.data()));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out.push(("head.weight".into(), self.head_weight.data()));
        if let Some(b) = &self.head_bias {
            out.push(("head.bias".into(), b));
        }
        out.push(("temperature.weight".into(), &self.temp_weight));
        out.push(("temperature.bias".into(), std::slice::from_ref(&self.temp_bias)));
        out.push(("temperature.gamma".into(), std::slice::from_ref(&self.gamma)));
        out.push(("temperature.beta".into(), std::slice::from_ref(&self.beta)));
        out
    }

    fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
        out.push(self.head_weight.data_mut());
        if let Some(b) = self.head_bias.as_mut() {
            out.push(b);
        }
        out.push(&mut self.temp_weight);
        out.push(std::slice::from_mut(&mut self.temp_bias));
        out.push(std::slice::from_mut(&mut self.gamma));
        out.push(std::slice::from_mut(&mut self.beta));
        out
    }
}

/// Analytic gradient of the mean cross-entropy of a train-mode trace.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, batch: &Matrix, labels: &[usize]) -> Result<Gradients> {
    if trace.mode != Mode::Train {
        return Err(Error::Contract("backward needs a train-mode trace".into()));
    }
    if trace.fingerprint != fingerprint(batch) {
        return Err(Error::Contract("trace was produced from a different batch".into()));
    }
    Ok(backprop(params, trace, batch, labels)?.0)
}

/// Gradient of `-log probs[y]` for one row with respect to the input, under
/// eval-mode semantics. `target` defaults to the predicted class.
pub fn input_gradient(params: &ModelParams, x: &[f64], target: Option<usize>) -> Result<Vec<f64>> {
    let batch = Matrix::new(1, x.len(), x.to_vec())?;
    let trace = forward(params, &batch, Mode::Eval)?;
    let y = target.unwrap_or_else(|| trace.predictions()[0]);
    Ok(backprop(params, &trace, &batch, &[y])?.1.into_data())
}

fn backprop(params: &ModelParams, trace: &ForwardTrace, batch: &Matrix, labels: &[usize]) -> Result<(Gradients, Matrix)> {
    check_labels(&trace.probs, labels)?;
    let n = labels.len();
    let c = params.num_classes();
    let p = params.penultimate_dim();
    let nf = n as f64;
    let features = trace.penultimate();
    let t = &params.temperature;
    let tt = &trace.temp;
    let mut grads = Gradients::zeros_like(params);

    // dLoss/dL = (probs - onehot) / n; L = g / T
    let mut d_raw = Matrix::zeros(n, c);
    let mut d_s = vec![0.0; n];
    let mut d_norm = vec![0.0; n];
    for i in 0..n {
        let temp = tt.temperature[i];
        let mut d_temp = 0.0;
        for j in 0..c {
            let mut delta = trace.probs.get(i, j);
            if j == labels[i] {
                delta -= 1.0;
            }
            delta /= nf;
            d_raw.set(i, j, delta / temp);
            d_temp -= delta * trace.raw_logits.get(i, j) / (temp * temp);
        }
        if tt.sigmoid[i] < TEMPERATURE_FLOOR {
            d_temp = 0.0;
        }
        let sg = tt.sigmoid[i];
        let dz = d_temp * sg * (1.0 - sg);
        grads.gamma += dz * tt.normalized[i];
        grads.beta += dz;
        d_norm[i] = t.gamma * dz;
    }
    match trace.mode {
        Mode::Train => {
            let inv_std = 1.0 / (tt.var + t.eps).sqrt();
            let sum_d: f64 = d_norm.iter().sum();
            let sum_dx: f64 = d_norm.iter().zip(&tt.normalized).map(|(d, x)| d * x).sum();
            for i in 0..n {
                d_s[i] = inv_std / nf * (nf * d_norm[i] - sum_d - tt.normalized[i] * sum_dx);
            }
        }
        Mode::Eval => {
            let inv_std = 1.0 / (tt.var + t.eps).sqrt();
            for i in 0..n {
                d_s[i] = d_norm[i] * inv_std;
            }
        }
    }

    let mut d_feat = Matrix::zeros(n, p);
    for i in 0..n {
        let f = features.row(i);
        grads.temp_bias += d_s[i];
        for k in 0..p {
            grads.temp_weight[k] += d_s[i] * f[k];
            d_feat.set(i, k, d_s[i] * t.weight[k]);
        }
    }

    match &params.head_bias {
        Some(_) => {
            let db = grads.head_bias.as_mut().expect("inner-product head");
            for i in 0..n {
                let f = features.row(i);
                for j in 0..c {
                    let g = d_raw.get(i, j);
                    db[j] += g;
                    let w = params.head_weight.row(j);
                    let dw = grads.head_weight.row_mut(j);
                    for k in 0..p {
                        dw[k] += g * f[k];
                    }
                    let df = d_feat.row_mut(i);
                    for k in 0..p {
                        df[k] += g * w[k];
                    }
                }
            }
        }
        None => {
            let w_norms: Vec<f64> = params.head_weight.iter_rows().map(norm).collect();
            for i in 0..n {
                let f = features.row(i);
                let nf_i = norm(f);
                if nf_i == 0.0 {
                    continue;
                }
                for j in 0..c {
                    let nw = w_norms[j];
                    if nw == 0.0 {
                        continue;
                    }
                    let g = d_raw.get(i, j);
                    let cos = trace.raw_logits.get(i, j);
                    let w = params.head_weight.row(j);
                    let inv = 1.0 / (nw * nf_i);
                    let df = d_feat.row_mut(i);
                    for k in 0..p {
                        df[k] += g * (w[k] * inv - cos * f[k] / (nf_i * nf_i));
                    }
                    let dw = grads.head_weight.row_mut(j);
                    for k in 0..p {
                        dw[k] += g * (f[k] * inv - cos * w[k] / (nw * nw));
                    }
                }
            }
        }
    }

    let mut d_out = d_feat;
    for l in (0..params.layers.len()).rev() {
        let pre = &trace.pre[l];
        let input = if l == 0 { batch } else { &trace.post[l - 1] };
        let layer = &params.layers[l];
        let (out_dim, in_dim) = layer.weight.shape();
        let mut d_pre = d_out;
        for (dv, &a) in d_pre.data_mut().iter_mut().zip(pre.data()) {
            if a <= 0.0 {
                *dv = 0.0;
            }
        }
        let g = &mut grads.layers[l];
        let mut d_in = Matrix::zeros(n, in_dim);
        for i in 0..n {
            let x = input.row(i);
            for j in 0..out_dim {
                let d = d_pre.get(i, j);
                if d == 0.0 {
                    continue;
                }
                g.bias[j] += d;
                let w = layer.weight.row(j);
                let gw = g.weight.row_mut(j);
                for k in 0..in_dim {
                    gw[k] += d * x[k];
                }
                let di = d_in.row_mut(i);
                for k in 0..in_dim {
                    di[k] += d * w[k];
                }
            }
        }
        d_out = d_in;
    }
    Ok((grads, d_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fractions of `epochs` at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            milestones: vec![0.5, 0.75, 0.9],
            decay_factor: 0.1,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Domain("epochs, batch size and learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Domain(format!("decay factor {} not in (0, 1]", self.decay_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| {
                let at = (m * self.epochs as f64).round() as usize;
                at > 0 && epoch >= at
            })
            .count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_auroc: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Called after every epoch with the current parameters; may fill in
/// [`EpochRecord::ood_auroc`].
pub type EpochHook<'a> = dyn FnMut(&ModelParams, &mut EpochRecord) -> Result<()> + 'a;

/// Mini-batch SGD with momentum (`v <- mu v + g`, `theta <- theta - lr v`).
/// A trailing batch of one row is dropped; train accuracy and loss are
/// running averages over the epoch's batches.
pub fn train(
    mut params: ModelParams,
    ds: &LabeledDataset,
    tc: &TrainConfig,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if ds.dim() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            ds.dim(),
            params.input_dim()
        )));
    }
    if ds.num_classes() > params.num_classes() {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, model {}",
            ds.num_classes(),
            params.num_classes()
        )));
    }
    let mut rng = stream_rng(tc.shuffle_seed, Stream::Shuffle);
    let mut velocity = Gradients::zeros_like(&params);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = ds.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels()[i]).collect();
            let trace = forward_train(&mut params, &batch)?;
            loss_sum += loss_ce(&trace, &labels)? * chunk.len() as f64;
            correct += trace
                .predictions()
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            seen += chunk.len();
            let grads = backward(&params, &trace, &batch, &labels)?;
            let mut g_groups = grads.groups();
            for ((_, theta), (v, (_, g))) in params
                .groups_mut()
                .into_iter()
                .zip(velocity.groups_mut().into_iter().zip(g_groups.drain(..)))
            {
                for ((th, vv), gg) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vv = tc.momentum * *vv + gg;
                    *th -= lr * *vv;
                }
            }
        }
        if seen == 0 {
            return Err(Error::Contract("no batch with at least 2 rows".into()));
        }
        let mut record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            ood_auroc: None,
        };
        if params.layers.iter().any(|l| l.weight.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("parameters diverged in epoch {}", epoch + 1)));
        }
        if let Some(h) = hook.as_mut() {
            h(&params, &mut record)?;
        }
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

pub mod names {
    pub const PENULTIMATE: &str = "penultimate";
    pub const RAW_LOGITS: &str = "raw_logits";
    pub const TEMPERATURE: &str = "temperature";
    pub const TEMPERED_LOGITS: &str = "tempered_logits";
    pub const PROBS: &str = "probs";
}

/// Eval-mode outputs for every row of `features`.
pub fn extract(params: &ModelParams, features: &Matrix) -> Result<FeatureDump> {
    let trace = forward(params, features, Mode::Eval)?;
    let mut dump = FeatureDump::default();
    dump.push_matrix(names::PENULTIMATE, trace.penultimate())?;
    dump.push_matrix(names::RAW_LOGITS, &trace.raw_logits)?;
    dump.push_vector(names::TEMPERATURE, trace.temperature())?;
    dump.push_matrix(names::TEMPERED_LOGITS, &trace.tempered_logits)?;
    dump.push_matrix(names::PROBS, &trace.probs)?;
    Ok(dump)
}

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: String,
    config: ModelConfig,
    params: ModelParams,
}

pub fn checkpoint_to_json(params: &ModelParams, cfg: &ModelConfig) -> Result<String> {
    params.validate(cfg)?;
    serde_json::to_string_pretty(&Checkpoint {
        version: CHECKPOINT_VERSION.into(),
        config: cfg.clone(),
        params: params.clone(),
    })
    .map_err(|e| Error::Contract(format!("checkpoint serialization: {e}")))
}

pub fn checkpoint_from_json(text: &str, path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::format(path, e.column() as u64, format!("invalid JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_VERSION) => {}
        other => {
            return Err(Error::format(path, 0, format!("unsupported checkpoint version {other:?}")));
        }
    }
    let ck: Checkpoint = serde_json::from_value(value)
        .map_err(|e| Error::format(path, 0, format!("checkpoint schema: {e}")))?;
    ck.config
        .validate()
        .and_then(|_| ck.params.validate(&ck.config))
        .map_err(|e| Error::format(path, 0, format!("inconsistent checkpoint: {e}")))?;
    Ok((ck.params, ck.config))
}

pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<()> {
    crate::dataset_io::write_atomic(path, checkpoint_to_json(params, cfg)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text, path)
}
