//! FPR@95, AUROC and AUPRC over ID/OOD score sets, computed exactly or from
//! 100-bin histograms.
//!
//! Scores always follow "higher = more OOD". FPR@95 and AUROC treat ID as the
//! positive class; AUPRC takes the positive class as a parameter.
//!
//! Both paths reduce to a list of tied score groups carrying (possibly
//! fractional) positive and negative weights, sorted from most to least
//! positive. A histogram bin is just such a group, so binned metrics are
//! exactly the metrics of the expanded, quantized score list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_TPR: f64 = 0.95;
/// Histogram totals above this are scaled down proportionally.
pub const MAX_HISTOGRAM_MASS: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positive {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Histogram,
}

/// ID and OOD oodness scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
}

impl ScoredSet {
    pub fn new(id: Vec<f64>, ood: Vec<f64>) -> Result<Self> {
        if id.is_empty() || ood.is_empty() {
            return Err(Error::Domain(format!(
                "metrics need both sides non-empty (id {}, ood {})",
                id.len(),
                ood.len()
            )));
        }
        if id.iter().chain(&ood).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite score".into()));
        }
        Ok(ScoredSet { id, ood })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Group {
    pos: f64,
    neg: f64,
}

/// Groups sorted by descending positive-direction score.
fn groups_from_scores(pos: &[f64], neg: &[f64]) -> Vec<Group> {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<Group> = Vec::new();
    let mut last = f64::NAN;
    for (s, is_pos) in all {
        // -0.0 and 0.0 tie
        if groups.is_empty() || s != last {
            groups.push(Group { pos: 0.0, neg: 0.0 });
            last = s;
        }
        let g = groups.last_mut().expect("pushed above");
        if is_pos {
            g.pos += 1.0;
        } else {
            g.neg += 1.0;
        }
    }
    groups
}

fn auroc_groups(groups: &[Group]) -> f64 {
    let total_pos: f64 = groups.iter().map(|g| g.pos).sum();
    let total_neg: f64 = groups.iter().map(|g| g.neg).sum();
    let mut neg_above = 0.0;
    let mut wins = 0.0;
    for g in groups {
        let neg_below = total_neg - neg_above - g.neg;
        wins += g.pos * neg_below + 0.5 * g.pos * g.neg;
        neg_above += g.neg;
    }
    wins / (total_pos * total_neg)
}

fn auprc_groups(groups: &[Group]) -> f64 {
    let total_pos: f64 = groups.iter().map(|g| g.pos).sum();
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0, 0.0);
    for g in groups {
        tp += g.pos;
        fp += g.neg;
        let recall = tp / total_pos;
        if g.pos > 0.0 {
            ap += (recall - prev_recall) * (tp / (tp + fp));
        }
        prev_recall = recall;
    }
    ap
}

/// Groups must have ID as the positive side.
fn fpr_groups(groups: &[Group], tpr_target: f64) -> f64 {
    let total_id: f64 = groups.iter().map(|g| g.pos).sum();
    let total_ood: f64 = groups.iter().map(|g| g.neg).sum();
    let (mut id_seen, mut ood_seen) = (0.0, 0.0);
    for g in groups {
        id_seen += g.pos;
        ood_seen += g.neg;
        if id_seen / total_id >= tpr_target {
            return ood_seen / total_ood;
        }
    }
    1.0
}

fn negated(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

/// (positive, negative) scores oriented so that higher means more positive.
fn oriented(s: &ScoredSet, positive: Positive) -> (Vec<f64>, Vec<f64>) {
    match positive {
        Positive::Id => (negated(&s.id), negated(&s.ood)),
        Positive::Ood => (s.ood.clone(), s.id.clone()),
    }
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc_exact(s: &ScoredSet, positive: Positive) -> f64 {
    let (p, n) = oriented(s, positive);
    auroc_groups(&groups_from_scores(&p, &n))
}

/// Step-wise average precision, `Σ (R_i - R_{i-1}) P_i` over tied groups.
pub fn auprc_exact(s: &ScoredSet, positive: Positive) -> f64 {
    let (p, n) = oriented(s, positive);
    auprc_groups(&groups_from_scores(&p, &n))
}

/// FPR on OOD at the largest observed ID-ness threshold that keeps at least
/// `tpr_target` of ID samples (ID-ness `>= τ`). Never interpolates.
pub fn fpr_at_tpr(s: &ScoredSet, tpr_target: f64) -> f64 {
    let (p, n) = oriented(s, Positive::Id);
    fpr_groups(&groups_from_scores(&p, &n), tpr_target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr_at_95tpr: f64,
    pub auroc_positive: Positive,
    pub auprc_positive: Positive,
    pub fpr_positive: Positive,
    pub method: Method,
    pub n_id: f64,
    pub n_ood: f64,
    #[serde(default)]
    pub degenerate_range: bool,
}

pub fn evaluate_exact(s: &ScoredSet, auprc_positive: Positive) -> MetricsReport {
    MetricsReport {
        auroc: auroc_exact(s, Positive::Id),
        auprc: auprc_exact(s, auprc_positive),
        fpr_at_95tpr: fpr_at_tpr(s, DEFAULT_TPR),
        auroc_positive: Positive::Id,
        auprc_positive,
        fpr_positive: Positive::Id,
        method: Method::Exact,
        n_id: s.id.len() as f64,
        n_ood: s.ood.len() as f64,
        degenerate_range: false,
    }
}

/// Maps raw scores into `[0, 1]` before binning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalizer {
    /// Known closed bounds, mapped affinely (`lo -> 0`, `hi -> 1`).
    Analytic { lo: f64, hi: f64 },
    /// Min and max over the combined ID and OOD scores.
    MinMax,
}

impl Normalizer {
    pub const IDENTITY: Normalizer = Normalizer::Analytic { lo: 0.0, hi: 1.0 };

    /// Bounds of the negated max-softmax score over `classes` classes.
    pub fn msp(classes: usize) -> Normalizer {
        Normalizer::Analytic {
            lo: -1.0,
            hi: -1.0 / classes as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub bins: usize,
    pub id_counts: Vec<f64>,
    pub ood_counts: Vec<f64>,
    /// Set when the score range collapsed to a point; all mass sits in bin 0.
    pub degenerate: bool,
}

impl HistogramPair {
    pub fn empty(bins: usize) -> Self {
        HistogramPair {
            bins,
            id_counts: vec![0.0; bins],
            ood_counts: vec![0.0; bins],
            degenerate: false,
        }
    }

    /// Bin of a normalized value; the top edge is inclusive.
    pub fn bin_of(&self, v: f64) -> usize {
        let b = (v.clamp(0.0, 1.0) * self.bins as f64).floor() as usize;
        b.min(self.bins - 1)
    }

    pub fn merge(&mut self, other: &HistogramPair) -> Result<()> {
        if other.bins != self.bins {
            return Err(Error::Dimension(format!(
                "merging {} bins into {}",
                other.bins, self.bins
            )));
        }
        for (a, b) in self.id_counts.iter_mut().zip(&other.id_counts) {
            *a += b;
        }
        for (a, b) in self.ood_counts.iter_mut().zip(&other.ood_counts) {
            *a += b;
        }
        self.degenerate |= other.degenerate;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.id_counts.iter().chain(&self.ood_counts).sum()
    }

    /// Scales both histograms so the combined mass is at most `max_total`.
    pub fn cap_total(&mut self, max_total: f64) {
        let total = self.total();
        if total > max_total {
            let f = max_total / total;
            self.id_counts.iter_mut().chain(self.ood_counts.iter_mut()).for_each(|c| *c *= f);
        }
    }

    fn groups(&self, positive: Positive) -> Vec<Group> {
        // bin index is the oodness; walk in positive-first order
        let make = |b: usize| {
            let (id, ood) = (self.id_counts[b], self.ood_counts[b]);
            match positive {
                Positive::Id => Group { pos: id, neg: ood },
                Positive::Ood => Group { pos: ood, neg: id },
            }
        };
        let order: Box<dyn Iterator<Item = usize>> = match positive {
            Positive::Id => Box::new(0..self.bins),
            Positive::Ood => Box::new((0..self.bins).rev()),
        };
        order
            .map(make)
            .filter(|g| g.pos > 0.0 || g.neg > 0.0)
            .collect()
    }
}

const SHARD: usize = 1 << 14;

fn accumulate(values: &[f64], map: impl Fn(f64) -> usize + Sync + Send, bins: usize) -> Vec<f64> {
    let shards = values.len().div_ceil(SHARD);
    let parts = par::map_indexed(shards, |s| {
        let mut counts = vec![0.0; bins];
        for &v in &values[s * SHARD..((s + 1) * SHARD).min(values.len())] {
            counts[map(v)] += 1.0;
        }
        counts
    });
    // merge in shard order
    let mut total = vec![0.0; bins];
    for p in parts {
        for (t, c) in total.iter_mut().zip(p) {
            *t += c;
        }
    }
    total
}

/// Normalizes, bins, and caps the total mass at [`MAX_HISTOGRAM_MASS`].
pub fn build_histograms(s: &ScoredSet, normalizer: Normalizer, bins: usize) -> Result<HistogramPair> {
    if bins == 0 {
        return Err(Error::Domain("bin count must be positive".into()));
    }
    let (lo, hi) = match normalizer {
        Normalizer::Analytic { lo, hi } => (lo, hi),
        Normalizer::MinMax => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in s.id.iter().chain(&s.ood) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        }
    };
    let mut h = HistogramPair::empty(bins);
    if !(hi > lo) {
        h.id_counts[0] = s.id.len() as f64;
        h.ood_counts[0] = s.ood.len() as f64;
        h.degenerate = true;
    } else {
        let width = hi - lo;
        let probe = HistogramPair::empty(bins);
        let map = |v: f64| probe.bin_of((v - lo) / width);
        h.id_counts = accumulate(&s.id, map, bins);
        h.ood_counts = accumulate(&s.ood, map, bins);
    }
    h.cap_total(MAX_HISTOGRAM_MASS);
    Ok(h)
}

/// Exact formulas applied to bins as weighted tie groups.
pub fn metrics_from_histograms(h: &HistogramPair, auprc_positive: Positive) -> Result<MetricsReport> {
    let n_id: f64 = h.id_counts.iter().sum();
    let n_ood: f64 = h.ood_counts.iter().sum();
    if !(n_id > 0.0 && n_ood > 0.0) {
        return Err(Error::Domain("histogram side has no mass".into()));
    }
    let id_groups = h.groups(Positive::Id);
    Ok(MetricsReport {
        auroc: auroc_groups(&id_groups),
        auprc: auprc_groups(&h.groups(auprc_positive)),
        fpr_at_95tpr: fpr_groups(&id_groups, DEFAULT_TPR),
        auroc_positive: Positive::Id,
        auprc_positive,
        fpr_positive: Positive::Id,
        method: Method::Histogram,
        n_id,
        n_ood,
        degenerate_range: h.degenerate,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force references, deliberately naive.

    use super::ScoredSet;

    pub fn auroc_pairs(s: &ScoredSet) -> f64 {
        let mut count = 0.0;
        for &i in &s.id {
            for &o in &s.ood {
                // ID-ness = -oodness
                if -i > -o {
                    count += 1.0;
                } else if -i == -o {
                    count += 0.5;
                }
            }
        }
        count / (s.id.len() as f64 * s.ood.len() as f64)
    }

    pub fn fpr_enumerate(s: &ScoredSet, target: f64) -> f64 {
        let idness: Vec<f64> = s.id.iter().map(|v| -v).collect();
        let mut candidates: Vec<f64> = idness.clone();
        candidates.extend(s.ood.iter().map(|v| -v));
        candidates.push(f64::NEG_INFINITY);
        let mut best: Option<f64> = None;
        for &tau in &candidates {
            let tpr = idness.iter().filter(|&&x| x >= tau).count() as f64 / idness.len() as f64;
            if tpr >= target && best.is_none_or(|b| tau > b) {
                best = Some(tau);
            }
        }
        let tau = best.unwrap();
        s.ood.iter().filter(|&&o| -o >= tau).count() as f64 / s.ood.len() as f64
    }

    /// Precision/recall recounted from scratch at each distinct threshold.
    pub fn auprc_steps(pos: &[f64], neg: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = pos.iter().filter(|&&x| x >= t).count() as f64;
            let fp = neg.iter().filter(|&&x| x >= t).count() as f64;
            let recall = tp / pos.len() as f64;
            if recall > prev_recall {
                ap += (recall - prev_recall) * tp / (tp + fp);
            }
            prev_recall = recall;
        }
        ap
    }
}
