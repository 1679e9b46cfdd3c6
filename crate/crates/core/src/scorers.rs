//! OOD scores and post-hoc transforms. Every score follows "higher = more OOD".

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset_io::FeatureDump;
use crate::error::{Error, Result};
use crate::metrics::Normalizer;
use crate::model::{self, names, ModelParams};
use crate::numerics::{logsumexp, percentile, squared_distance, CholeskyFactor, Matrix};
use crate::par;

/// Ablated learned-temperature energy: `-log Σ_c exp(L_c)` over tempered logits.
pub fn abet(tempered: &[f64]) -> Result<f64> {
    Ok(-logsumexp(tempered)?)
}

/// Energy with the learned temperature kept in front: `-T log Σ_c exp(L_c)`.
pub fn energy_learned_eq1(tempered: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(Error::Domain(format!("learned temperature {temperature} not in (0, 1]")));
    }
    Ok(temperature * abet(tempered)?)
}

/// Scalar-temperature energy `-T log Σ_c exp(g_c / T)` over raw logits.
pub fn energy_scalar(raw: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("scalar temperature {temperature} must be positive")));
    }
    let scaled: Vec<f64> = raw.iter().map(|g| g / temperature).collect();
    Ok(-temperature * logsumexp(&scaled)?)
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Domain("empty probability row".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("probabilities sum to {total}")));
    }
    Ok(())
}

fn row_max(v: &[f64]) -> Result<f64> {
    v.iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Domain("empty row".into()))
}

/// Negated maximum softmax probability.
pub fn msp(probs: &[f64]) -> Result<f64> {
    check_distribution(probs)?;
    Ok(-row_max(probs)?)
}

pub fn max_logit(raw: &[f64]) -> Result<f64> {
    Ok(-row_max(raw)?)
}

/// Softmax entropy divided by `ln C`, with `0 ln 0 = 0`.
pub fn entropy_norm(probs: &[f64]) -> Result<f64> {
    check_distribution(probs)?;
    if probs.len() < 2 {
        return Err(Error::Domain("normalized entropy needs at least 2 classes".into()));
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok((h / (probs.len() as f64).ln()).clamp(0.0, 1.0))
}

/// The learned temperature itself.
pub fn temp_score(temperature: f64) -> f64 {
    temperature
}

/// Class means and a tied, ridge-regularized covariance factor.
#[derive(Debug, Clone)]
pub struct MahalanobisFit {
    pub means: Matrix,
    pub factor: CholeskyFactor,
    pub ridge: f64,
}

pub const MAHALANOBIS_RIDGE_SCALE: f64 = 1e-6;

impl MahalanobisFit {
    pub fn from_parts(means: Matrix, covariance: &Matrix) -> Result<Self> {
        if covariance.shape() != (means.cols(), means.cols()) {
            return Err(Error::Dimension("covariance does not match mean width".into()));
        }
        Ok(MahalanobisFit {
            factor: CholeskyFactor::factor(covariance)?,
            means,
            ridge: 0.0,
        })
    }
}

/// Σ = (1/N) Σ_c Σ_{i∈c} (f_i - μ_c)(f_i - μ_c)ᵀ + λI with λ = 1e-6 · tr(Σ)/p.
pub fn fit_mahalanobis(penultimate: &Matrix, labels: &[usize], num_classes: usize) -> Result<MahalanobisFit> {
    let (n, p) = penultimate.shape();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    let mut counts = vec![0usize; num_classes];
    let mut means = Matrix::zeros(num_classes, p);
    for (row, &y) in penultimate.iter_rows().zip(labels) {
        if y >= num_classes {
            return Err(Error::Domain(format!("label {y} outside [0, {num_classes})")));
        }
        counts[y] += 1;
        means.row_mut(y).iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    if let Some(c) = counts.iter().position(|&k| k < 2) {
        return Err(Error::Contract(format!(
            "class {c} has {} samples; covariance pooling needs at least 2",
            counts[c]
        )));
    }
    for c in 0..num_classes {
        let k = counts[c] as f64;
        means.row_mut(c).iter_mut().for_each(|m| *m /= k);
    }
    let mut cov = Matrix::zeros(p, p);
    let mut centered = vec![0.0; p];
    for (row, &y) in penultimate.iter_rows().zip(labels) {
        for (d, (v, m)) in centered.iter_mut().zip(row.iter().zip(means.row(y))) {
            *d = v - m;
        }
        for a in 0..p {
            let ca = centered[a];
            let out = cov.row_mut(a);
            for b in 0..p {
                out[b] += ca * centered[b];
            }
        }
    }
    let nf = n as f64;
    cov.data_mut().iter_mut().for_each(|v| *v /= nf);
    let trace: f64 = (0..p).map(|i| cov.get(i, i)).sum();
    let ridge = MAHALANOBIS_RIDGE_SCALE * trace / p as f64;
    for i in 0..p {
        let d = cov.get(i, i);
        cov.set(i, i, d + ridge);
    }
    let factor = CholeskyFactor::factor(&cov).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot } => Error::Numerical(format!(
            "tied covariance not positive definite after ridge {ridge} (pivot {pivot})"
        )),
        other => other,
    })?;
    Ok(MahalanobisFit { means, factor, ridge })
}

/// `min_c (f - μ_c)ᵀ Σ⁻¹ (f - μ_c)`.
pub fn mahalanobis(fit: &MahalanobisFit, f: &[f64]) -> Result<f64> {
    if f.len() != fit.means.cols() {
        return Err(Error::Dimension(format!(
            "feature width {} vs fitted {}",
            f.len(),
            fit.means.cols()
        )));
    }
    let mut best = f64::INFINITY;
    let mut diff = vec![0.0; f.len()];
    for mu in fit.means.iter_rows() {
        diff.iter_mut().zip(f.iter().zip(mu)).for_each(|(d, (a, b))| *d = a - b);
        best = best.min(fit.factor.quadratic_form_inverse(&diff));
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct KnnFit {
    pub bank: Matrix,
    pub k: usize,
    pub normalize: bool,
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = crate::numerics::norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

pub fn fit_knn(bank: &Matrix, k: usize, normalize: bool) -> Result<KnnFit> {
    if k == 0 || k > bank.rows() {
        return Err(Error::Domain(format!("k = {k} outside [1, {}]", bank.rows())));
    }
    let bank = if normalize {
        let data = bank.iter_rows().flat_map(l2_normalized).collect();
        Matrix::new(bank.rows(), bank.cols(), data)?
    } else {
        bank.clone()
    };
    Ok(KnnFit { bank, k, normalize })
}

/// Euclidean distance to the k-th nearest bank vector (ties by bank index).
pub fn knn(fit: &KnnFit, f: &[f64]) -> Result<f64> {
    if f.len() != fit.bank.cols() {
        return Err(Error::Dimension(format!(
            "feature width {} vs bank {}",
            f.len(),
            fit.bank.cols()
        )));
    }
    let q = if fit.normalize { l2_normalized(f) } else { f.to_vec() };
    let mut d: Vec<(f64, usize)> = fit
        .bank
        .iter_rows()
        .enumerate()
        .map(|(i, b)| (squared_distance(&q, b), i))
        .collect();
    let k = fit.k - 1;
    let (_, kth, _) = d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(kth.0.sqrt())
}

/// Per-class standardization of the max logit.
#[derive(Debug, Clone, PartialEq)]
pub struct SmlFit {
    /// `(mean, std)` per predicted class; `None` when unseen or degenerate.
    pub per_class: Vec<Option<(f64, f64)>>,
    pub global: (f64, f64),
}

pub const SML_MIN_STD: f64 = 1e-12;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits max-logit mean and (population) standard deviation per predicted class.
pub fn fit_sml(raw: &Matrix, predictions: &[usize]) -> Result<SmlFit> {
    if raw.rows() == 0 || predictions.len() != raw.rows() {
        return Err(Error::Dimension("SML fit needs one prediction per non-empty row".into()));
    }
    let c = raw.cols();
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); c];
    let mut all = Vec::with_capacity(raw.rows());
    for (row, &p) in raw.iter_rows().zip(predictions) {
        let m = row_max(row)?;
        by_class
            .get_mut(p)
            .ok_or_else(|| Error::Domain(format!("prediction {p} outside [0, {c})")))?
            .push(m);
        all.push(m);
    }
    let global = mean_std(&all);
    let global = (global.0, if global.1 > SML_MIN_STD { global.1 } else { 1.0 });
    let per_class = by_class
        .iter()
        .map(|v| {
            if v.is_empty() {
                return None;
            }
            let (m, s) = mean_std(v);
            (s > SML_MIN_STD).then_some((m, s))
        })
        .collect();
    Ok(SmlFit { per_class, global })
}

/// `-(max g - μ_ĉ) / σ_ĉ` for the argmax class `ĉ`.
pub fn sml(fit: &SmlFit, raw: &[f64]) -> Result<f64> {
    let pred = argmax(raw)?;
    let m = raw[pred];
    let (mu, sigma) = fit.per_class.get(pred).copied().flatten().unwrap_or(fit.global);
    Ok(-(m - mu) / sigma)
}

fn argmax(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::Domain("argmax of empty row".into()));
    }
    Ok(v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactFit {
    /// Clip limit; `+∞` disables clipping.
    pub limit: f64,
}

impl ReactFit {
    pub const IDENTITY: ReactFit = ReactFit { limit: f64::INFINITY };
}

/// Clip limit at the nearest-rank percentile of every ID penultimate entry.
pub fn fit_react(penultimate: &Matrix, pct: f64) -> Result<ReactFit> {
    Ok(ReactFit {
        limit: percentile(penultimate.data(), pct)?,
    })
}

pub fn apply_react(fit: &ReactFit, features: &Matrix) -> Matrix {
    let mut out = features.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.min(fit.limit));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceFit {
    /// Row-major `C x p` keep mask.
    pub mask: Vec<bool>,
    pub classes: usize,
    pub width: usize,
    pub keep_fraction: f64,
}

/// Keeps, per class row, the `ceil(keep_fraction * p)` weights with the
/// largest contribution `W[c, j] * mean_activation[j]` (ties to the lower column).
pub fn fit_dice(head_weight: &Matrix, mean_activation: &[f64], keep_fraction: f64) -> Result<DiceFit> {
    let (c, p) = head_weight.shape();
    if mean_activation.len() != p {
        return Err(Error::Dimension(format!(
            "mean activation length {} vs head width {p}",
            mean_activation.len()
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Domain(format!("keep fraction {keep_fraction} not in (0, 1]")));
    }
    let keep = ((keep_fraction * p as f64).ceil() as usize).clamp(1, p);
    let mut mask = vec![false; c * p];
    for r in 0..c {
        let w = head_weight.row(r);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (w[a] * mean_activation[a], w[b] * mean_activation[b]);
            vb.total_cmp(&va).then(a.cmp(&b))
        });
        for &j in &order[..keep] {
            mask[r * p + j] = true;
        }
    }
    Ok(DiceFit {
        mask,
        classes: c,
        width: p,
        keep_fraction,
    })
}

impl DiceFit {
    pub fn masked_weight(&self, head_weight: &Matrix) -> Result<Matrix> {
        if head_weight.shape() != (self.classes, self.width) {
            return Err(Error::Dimension("DICE mask does not match head weight".into()));
        }
        let mut out = head_weight.clone();
        for (v, &keep) in out.data_mut().iter_mut().zip(&self.mask) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

/// Raw logits for `features` with the DICE-masked head.
pub fn apply_dice(fit: &DiceFit, params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    let w = fit.masked_weight(&params.head_weight)?;
    model::head_logits(features, &w, params.head_bias.as_deref())
}

/// Zeroes entries strictly below this row's nearest-rank percentile.
/// A simplified activation-pruning stand-in, not a faithful ASH variant.
pub fn apply_ash_p(row: &[f64], prune_percentile: f64) -> Result<Vec<f64>> {
    let t = percentile(row, prune_percentile)?;
    Ok(row.iter().map(|&v| if v < t { 0.0 } else { v }).collect())
}

/// `x - ε sign(∇_x(-log p_ŷ(x)))` for the predicted class ŷ, with `sign(0) = 0`.
pub fn odin_perturb(params: &ModelParams, x: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("ODIN epsilon {epsilon} must be >= 0")));
    }
    if epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let g = model::input_gradient(params, x, None)?;
    Ok(x.iter()
        .zip(&g)
        .map(|(&xi, &gi)| {
            if gi > 0.0 {
                xi - epsilon
            } else if gi < 0.0 {
                xi + epsilon
            } else {
                xi
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerId {
    Abet,
    EnergyEq1,
    Energy,
    Msp,
    MaxLogit,
    Entropy,
    Temperature,
    Mahalanobis,
    Knn,
    Sml,
}

impl ScorerId {
    pub const ALL: [ScorerId; 10] = [
        ScorerId::Abet,
        ScorerId::EnergyEq1,
        ScorerId::Energy,
        ScorerId::Msp,
        ScorerId::MaxLogit,
        ScorerId::Entropy,
        ScorerId::Temperature,
        ScorerId::Mahalanobis,
        ScorerId::Knn,
        ScorerId::Sml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerId::Abet => "abet",
            ScorerId::EnergyEq1 => "energy_eq1",
            ScorerId::Energy => "energy",
            ScorerId::Msp => "msp",
            ScorerId::MaxLogit => "max_logit",
            ScorerId::Entropy => "entropy",
            ScorerId::Temperature => "temperature",
            ScorerId::Mahalanobis => "mahalanobis",
            ScorerId::Knn => "knn",
            ScorerId::Sml => "sml",
        }
    }

    /// Whether scoring needs state fitted on ID training outputs.
    pub fn needs_fit(self) -> bool {
        matches!(self, ScorerId::Mahalanobis | ScorerId::Knn | ScorerId::Sml)
    }

    /// Histogram normalizer: closed bounds where the score has them.
    pub fn normalizer(self, classes: usize) -> Normalizer {
        match self {
            ScorerId::Msp => Normalizer::msp(classes),
            ScorerId::Entropy | ScorerId::Temperature => Normalizer::IDENTITY,
            _ => Normalizer::MinMax,
        }
    }
}

impl fmt::Display for ScorerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown scorer {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosthocConfig {
    pub react_percentile: f64,
    pub dice_keep_fraction: f64,
    pub ash_prune_percentile: f64,
    pub odin_epsilon: f64,
    pub knn_k: usize,
    pub knn_normalize: bool,
    pub scalar_temperature: f64,
    /// Keep each sample's original learned temperature under feature transforms.
    pub freeze_temperature: bool,
}

impl Default for PosthocConfig {
    fn default() -> Self {
        PosthocConfig {
            react_percentile: 90.0,
            dice_keep_fraction: 0.10,
            ash_prune_percentile: 90.0,
            odin_epsilon: 0.0,
            knn_k: 50,
            knn_normalize: true,
            scalar_temperature: 1.0,
            freeze_temperature: false,
        }
    }
}

impl PosthocConfig {
    pub fn validate(&self) -> Result<()> {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        if !pct(self.react_percentile) || !pct(self.ash_prune_percentile) {
            return Err(Error::Domain("percentiles must lie in [0, 100]".into()));
        }
        if !(self.dice_keep_fraction > 0.0 && self.dice_keep_fraction <= 1.0) {
            return Err(Error::Domain("DICE keep fraction must lie in (0, 1]".into()));
        }
        if !(self.odin_epsilon >= 0.0) || !(self.scalar_temperature > 0.0) || self.knn_k == 0 {
            return Err(Error::Domain("need epsilon >= 0, scalar temperature > 0, k >= 1".into()));
        }
        Ok(())
    }
}

/// State fitted on ID training outputs for one scorer.
#[derive(Debug, Clone, Default)]
pub enum FittedScorer {
    #[default]
    None,
    Mahalanobis(MahalanobisFit),
    Knn(KnnFit),
    Sml(SmlFit),
}

/// Fits whatever `scorer` needs from an ID-training extract (labels required
/// for Mahalanobis).
pub fn fit_scorer(scorer: ScorerId, id_train: &FeatureDump, cfg: &PosthocConfig) -> Result<FittedScorer> {
    Ok(match scorer {
        ScorerId::Mahalanobis => {
            let f = id_train.matrix(names::PENULTIMATE)?;
            let classes = id_train.matrix(names::RAW_LOGITS)?.cols();
            let labels: Vec<usize> = id_train
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract("Mahalanobis fit needs labels in the dump".into()))?
                .iter()
                .map(|&l| l as usize)
                .collect();
            FittedScorer::Mahalanobis(fit_mahalanobis(&f, &labels, classes)?)
        }
        ScorerId::Knn => {
            let f = id_train.matrix(names::PENULTIMATE)?;
            let k = cfg.knn_k.min(f.rows());
            FittedScorer::Knn(fit_knn(&f, k, cfg.knn_normalize)?)
        }
        ScorerId::Sml => {
            let raw = id_train.matrix(names::RAW_LOGITS)?;
            FittedScorer::Sml(fit_sml(&raw, &model::argmax_rows(&raw))?)
        }
        _ => FittedScorer::None,
    })
}

/// Inference-time modification applied before scoring.
#[derive(Debug, Clone, Default)]
pub enum Transform {
    #[default]
    None,
    React(ReactFit),
    Dice(DiceFit),
    Ash { percentile: f64 },
    Odin { epsilon: f64 },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::None => "none",
            Transform::React(_) => "react",
            Transform::Dice(_) => "dice",
            Transform::Ash { .. } => "ash",
            Transform::Odin { .. } => "odin",
        }
    }

    /// Fits a transform by name from the model and an ID-training extract.
    pub fn fit(name: &str, params: &ModelParams, id_train: Option<&FeatureDump>, cfg: &PosthocConfig) -> Result<Transform> {
        let need = || id_train.ok_or_else(|| Error::Contract(format!("transform {name:?} needs ID training outputs")));
        Ok(match name {
            "none" => Transform::None,
            "react" => Transform::React(fit_react(&need()?.matrix(names::PENULTIMATE)?, cfg.react_percentile)?),
            "dice" => {
                let f = need()?.matrix(names::PENULTIMATE)?;
                let n = f.rows() as f64;
                let mut mean = vec![0.0; f.cols()];
                for r in f.iter_rows() {
                    mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n);
                Transform::Dice(fit_dice(&params.head_weight, &mean, cfg.dice_keep_fraction)?)
            }
            "ash" => Transform::Ash {
                percentile: cfg.ash_prune_percentile,
            },
            "odin" => Transform::Odin {
                epsilon: cfg.odin_epsilon,
            },
            other => return Err(Error::Domain(format!("unknown transform {other:?}"))),
        })
    }
}

/// Model and raw inputs needed to recompute outputs under a transform.
#[derive(Debug, Clone, Copy, Default)]
pub struct TransformContext<'a> {
    pub params: Option<&'a ModelParams>,
    pub inputs: Option<&'a Matrix>,
    pub freeze_temperature: bool,
}

/// Model outputs a scorer reads from.
struct Outputs {
    penultimate: Option<Matrix>,
    raw: Option<Matrix>,
    temperature: Option<Vec<f64>>,
    tempered: Option<Matrix>,
    probs: Option<Matrix>,
}

impl Outputs {
    fn from_dump(dump: &FeatureDump, scorer: ScorerId) -> Result<Self> {
        let want = needs(scorer);
        Ok(Outputs {
            penultimate: want.penultimate.then(|| dump.matrix(names::PENULTIMATE)).transpose()?,
            raw: want.raw.then(|| dump.matrix(names::RAW_LOGITS)).transpose()?,
            temperature: want.temperature.then(|| dump.vector(names::TEMPERATURE)).transpose()?,
            tempered: want.tempered.then(|| dump.matrix(names::TEMPERED_LOGITS)).transpose()?,
            probs: want.probs.then(|| dump.matrix(names::PROBS)).transpose()?,
        })
    }

    fn recomputed(penultimate: Matrix, raw: Matrix, temperature: Vec<f64>) -> Result<Self> {
        let (tempered, probs) = model::temper(&raw, &temperature)?;
        Ok(Outputs {
            penultimate: Some(penultimate),
            raw: Some(raw),
            temperature: Some(temperature),
            tempered: Some(tempered),
            probs: Some(probs),
        })
    }

    fn rows(&self) -> usize {
        [
            self.penultimate.as_ref().map(Matrix::rows),
            self.raw.as_ref().map(Matrix::rows),
            self.temperature.as_ref().map(Vec::len),
            self.tempered.as_ref().map(Matrix::rows),
            self.probs.as_ref().map(Matrix::rows),
        ]
        .into_iter()
        .flatten()
        .next()
        .unwrap_or(0)
    }
}

#[derive(Default)]
struct Needs {
    penultimate: bool,
    raw: bool,
    temperature: bool,
    tempered: bool,
    probs: bool,
}

fn needs(scorer: ScorerId) -> Needs {
    let mut n = Needs::default();
    match scorer {
        ScorerId::Abet => n.tempered = true,
        ScorerId::EnergyEq1 => {
            n.tempered = true;
            n.temperature = true;
        }
        ScorerId::Energy | ScorerId::MaxLogit | ScorerId::Sml => n.raw = true,
        ScorerId::Msp | ScorerId::Entropy => n.probs = true,
        ScorerId::Temperature => n.temperature = true,
        ScorerId::Mahalanobis | ScorerId::Knn => n.penultimate = true,
    }
    n
}

fn need<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Contract(format!("scorer input {name:?} unavailable")))
}

fn apply_transform(transform: &Transform, dump: &FeatureDump, scorer: ScorerId, ctx: &TransformContext<'_>) -> Result<Outputs> {
    if matches!(transform, Transform::None) {
        return Outputs::from_dump(dump, scorer);
    }
    let params = ctx
        .params
        .ok_or_else(|| Error::Contract(format!("transform {} needs model parameters", transform.name())))?;
    if let Transform::Odin { epsilon } = transform {
        let inputs = ctx
            .inputs
            .ok_or_else(|| Error::Contract("ODIN needs the raw inputs".into()))?;
        let rows = par::map_indexed(inputs.rows(), |i| odin_perturb(params, inputs.row(i), *epsilon));
        let mut data = Vec::with_capacity(inputs.data().len());
        for r in rows {
            data.extend(r?);
        }
        let perturbed = Matrix::new(inputs.rows(), inputs.cols(), data)?;
        return Outputs::from_dump(&model::extract(params, &perturbed)?, scorer);
    }
    let original = dump.matrix(names::PENULTIMATE)?;
    let (features, head_weight) = match transform {
        Transform::React(fit) => (apply_react(fit, &original), None),
        Transform::Ash { percentile } => {
            let mut data = Vec::with_capacity(original.data().len());
            for r in original.iter_rows() {
                data.extend(apply_ash_p(r, *percentile)?);
            }
            (Matrix::new(original.rows(), original.cols(), data)?, None)
        }
        Transform::Dice(fit) => (original, Some(fit.masked_weight(&params.head_weight)?)),
        Transform::None | Transform::Odin { .. } => unreachable!("handled above"),
    };
    let raw = model::head_logits(
        &features,
        head_weight.as_ref().unwrap_or(&params.head_weight),
        params.head_bias.as_deref(),
    )?;
    let temperature = if ctx.freeze_temperature {
        dump.vector(names::TEMPERATURE)?
    } else {
        model::temperatures(params, &features)
    };
    Outputs::recomputed(features, raw, temperature)
}

fn score_row(scorer: ScorerId, out: &Outputs, i: usize, fitted: &FittedScorer, cfg: &PosthocConfig) -> Result<f64> {
    match scorer {
        ScorerId::Abet => abet(need(&out.tempered, names::TEMPERED_LOGITS)?.row(i)),
        ScorerId::EnergyEq1 => energy_learned_eq1(
            need(&out.tempered, names::TEMPERED_LOGITS)?.row(i),
            need(&out.temperature, names::TEMPERATURE)?[i],
        ),
        ScorerId::Energy => energy_scalar(need(&out.raw, names::RAW_LOGITS)?.row(i), cfg.scalar_temperature),
        ScorerId::Msp => msp(need(&out.probs, names::PROBS)?.row(i)),
        ScorerId::MaxLogit => max_logit(need(&out.raw, names::RAW_LOGITS)?.row(i)),
        ScorerId::Entropy => entropy_norm(need(&out.probs, names::PROBS)?.row(i)),
        ScorerId::Temperature => Ok(temp_score(need(&out.temperature, names::TEMPERATURE)?[i])),
        ScorerId::Mahalanobis => match fitted {
            FittedScorer::Mahalanobis(fit) => mahalanobis(fit, need(&out.penultimate, names::PENULTIMATE)?.row(i)),
            _ => Err(Error::Contract("mahalanobis scorer is not fitted".into())),
        },
        ScorerId::Knn => match fitted {
            FittedScorer::Knn(fit) => knn(fit, need(&out.penultimate, names::PENULTIMATE)?.row(i)),
            _ => Err(Error::Contract("knn scorer is not fitted".into())),
        },
        ScorerId::Sml => match fitted {
            FittedScorer::Sml(fit) => sml(fit, need(&out.raw, names::RAW_LOGITS)?.row(i)),
            _ => Err(Error::Contract("sml scorer is not fitted".into())),
        },
    }
}

/// Scores every row of a model-output dump, after applying `transform`.
pub fn score_batch(
    scorer: ScorerId,
    dump: &FeatureDump,
    fitted: &FittedScorer,
    cfg: &PosthocConfig,
    transform: &Transform,
    ctx: &TransformContext<'_>,
) -> Result<Vec<f64>> {
    let out = apply_transform(transform, dump, scorer, ctx)?;
    par::map_indexed(out.rows(), |i| score_row(scorer, &out, i, fitted, cfg))
        .into_iter()
        .collect()
}

/// Applies a logit/temperature scorer independently at every pixel of an
/// `h x w x c` raw-logit map; per-box scoring is `w = 1`.
pub fn score_map(raw: &[f64], shape: (usize, usize, usize), temperature: &[f64], scorer: ScorerId, cfg: &PosthocConfig) -> Result<Matrix> {
    let (h, w, c) = shape;
    if raw.len() != h * w * c || temperature.len() != h * w || c == 0 {
        return Err(Error::Dimension(format!(
            "logit map of {} values and {} temperatures for shape {h}x{w}x{c}",
            raw.len(),
            temperature.len()
        )));
    }
    if scorer.needs_fit() {
        return Err(Error::Contract(format!("{scorer} is not a per-pixel logit scorer")));
    }
    let raw_m = Matrix::new(h * w, c, raw.to_vec())?;
    let (tempered, probs) = model::temper(&raw_m, temperature)?;
    let out = Outputs {
        penultimate: None,
        raw: Some(raw_m),
        temperature: Some(temperature.to_vec()),
        tempered: Some(tempered),
        probs: Some(probs),
    };
    let fitted = FittedScorer::None;
    let values: Result<Vec<f64>> = par::map_indexed(h * w, |i| score_row(scorer, &out, i, &fitted, cfg))
        .into_iter()
        .collect();
    Matrix::new(h, w, values?)
}
