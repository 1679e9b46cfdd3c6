//! Where detection fails: misclassified-vs-correct breakdowns, OOD-proximal
//! nearest-neighbor accuracy and normal-approximation score intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fpr_at_tpr, ScoredSet, DEFAULT_TPR};
use crate::numerics::{squared_distance, Matrix};
use crate::par;

/// ID and OOD oodness scores of one scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerScores {
    pub scorer: String,
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFpr {
    pub scorer: String,
    /// `None` when the correct split is empty.
    pub fpr95_correct_vs_ood: Option<f64>,
    /// `None` when the misclassified split is empty.
    pub fpr95_mis_vs_ood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisclassifiedBreakdown {
    pub n_correct: usize,
    pub n_misclassified: usize,
    pub scorers: Vec<SplitFpr>,
}

fn correctness(predictions: &[usize], labels: &[usize]) -> Result<Vec<bool>> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions.iter().zip(labels).map(|(p, y)| p == y).collect())
}

fn partition(scores: &[f64], correct: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (&s, &c) in scores.iter().zip(correct) {
        if c { ok.push(s) } else { bad.push(s) }
    }
    (ok, bad)
}

fn fpr_or_unavailable(id: Vec<f64>, ood: &[f64]) -> Result<Option<f64>> {
    if id.is_empty() {
        return Ok(None);
    }
    Ok(Some(fpr_at_tpr(&ScoredSet::new(id, ood.to_vec())?, DEFAULT_TPR)))
}

/// FPR@95 of each ID split (correct / misclassified) against the same OOD scores.
pub fn misclassified_split_eval(
    predictions: &[usize],
    labels: &[usize],
    scores: &[ScorerScores],
) -> Result<MisclassifiedBreakdown> {
    let correct = correctness(predictions, labels)?;
    let n_correct = correct.iter().filter(|&&c| c).count();
    let mut out = Vec::with_capacity(scores.len());
    for s in scores {
        if s.id.len() != correct.len() {
            return Err(Error::Dimension(format!(
                "{}: {} ID scores for {} ID samples",
                s.scorer,
                s.id.len(),
                correct.len()
            )));
        }
        let (ok, bad) = partition(&s.id, &correct);
        out.push(SplitFpr {
            scorer: s.scorer.clone(),
            fpr95_correct_vs_ood: fpr_or_unavailable(ok, &s.ood)?,
            fpr95_mis_vs_ood: fpr_or_unavailable(bad, &s.ood)?,
        });
    }
    Ok(MisclassifiedBreakdown {
        n_correct,
        n_misclassified: correct.len() - n_correct,
        scorers: out,
    })
}

/// `(correct split, misclassified split, full ID set)` FPR at `tpr_target`,
/// all thresholds chosen by the same nearest-rank rule. Because each split's
/// cumulative ID fraction mixes into the full one, the full-set FPR lies
/// within the hull of the split values.
pub fn split_fpr_with_full(scores: &ScorerScores, correct: &[bool], tpr_target: f64) -> Result<(f64, f64, f64)> {
    let (ok, bad) = partition(&scores.id, correct);
    let fpr = |id: Vec<f64>| -> Result<f64> { Ok(fpr_at_tpr(&ScoredSet::new(id, scores.ood.clone())?, tpr_target)) };
    Ok((fpr(ok)?, fpr(bad)?, fpr(scores.id.clone())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximalAccuracy {
    pub proximal_accuracy: f64,
    pub overall_accuracy: f64,
    pub n_ood: usize,
}

/// Exact Euclidean 1-NN of `q` among `bank` rows, lowest index on ties.
pub fn nearest_row(bank: &Matrix, q: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, r) in bank.iter_rows().enumerate() {
        let d = squared_distance(q, r);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Mean correctness of the ID test points nearest to each OOD embedding
/// (with multiplicity), alongside overall ID accuracy.
pub fn ood_proximal_accuracy(id_penultimate: &Matrix, correct: &[bool], ood_penultimate: &Matrix) -> Result<ProximalAccuracy> {
    if id_penultimate.rows() == 0 || ood_penultimate.rows() == 0 {
        return Err(Error::Domain("proximal accuracy needs ID and OOD embeddings".into()));
    }
    if correct.len() != id_penultimate.rows() {
        return Err(Error::Dimension(format!(
            "{} correctness flags for {} ID rows",
            correct.len(),
            id_penultimate.rows()
        )));
    }
    if id_penultimate.cols() != ood_penultimate.cols() {
        return Err(Error::Dimension("ID and OOD embedding widths differ".into()));
    }
    let nn = par::map_indexed(ood_penultimate.rows(), |i| nearest_row(id_penultimate, ood_penultimate.row(i)));
    let hits = nn.iter().filter(|&&j| correct[j]).count();
    let total = correct.iter().filter(|&&c| c).count();
    Ok(ProximalAccuracy {
        proximal_accuracy: hits as f64 / nn.len() as f64,
        overall_accuracy: total as f64 / correct.len() as f64,
        n_ood: nn.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
    pub level: f64,
    pub n: usize,
    /// Always the normal approximation.
    pub method: IntervalMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Normal,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn disjoint(&self, other: &ConfidenceInterval) -> bool {
        self.upper() < other.lower() || other.upper() < self.lower()
    }
}

/// Two-sided standard normal quantiles for the supported levels.
const Z_TABLE: [(f64, f64); 3] = [(0.90, 1.6448536), (0.95, 1.9599640), (0.99, 2.5758293)];

pub fn z_for_level(level: f64) -> Result<f64> {
    Z_TABLE
        .iter()
        .find(|(l, _)| (l - level).abs() < 1e-12)
        .map(|&(_, z)| z)
        .ok_or_else(|| Error::Domain(format!("unsupported confidence level {level}; use 0.90, 0.95 or 0.99")))
}

/// `mean ± z s / √n` with the n−1 sample standard deviation.
pub fn score_confidence_interval(scores: &[f64], level: f64) -> Result<ConfidenceInterval> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::Domain(format!("confidence interval needs n >= 2, got {n}")));
    }
    let z = z_for_level(level)?;
    let nf = n as f64;
    let mean = scores.iter().sum::<f64>() / nf;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (nf - 1.0);
    Ok(ConfidenceInterval {
        mean,
        half_width: z * var.sqrt() / nf.sqrt(),
        level,
        n,
        method: IntervalMethod::Normal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ci_examples() {
        let ci = score_confidence_interval(&[0.0, 2.0], 0.99).unwrap();
        assert_eq!(ci.mean, 1.0);
        assert!((ci.half_width - 2.5758293).abs() < 1e-12);
        assert_eq!(score_confidence_interval(&[3.0; 10], 0.99).unwrap().half_width, 0.0);
        assert!(score_confidence_interval(&[1.0], 0.99).is_err());
        assert!(score_confidence_interval(&[1.0, 2.0], 0.42).is_err());
    }

    #[test]
    fn ci_shrinks_with_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..1.0)).collect();
        let doubled: Vec<f64> = s.iter().chain(&s).copied().collect();
        let a = score_confidence_interval(&s, 0.99).unwrap();
        let b = score_confidence_interval(&doubled, 0.99).unwrap();
        let ratio = b.half_width / a.half_width;
        assert!((ratio - 1.0 / 2f64.sqrt()).abs() / (1.0 / 2f64.sqrt()) < 0.02, "{ratio}");
    }

    #[test]
    fn disjointness() {
        let a = score_confidence_interval(&[0.0, 0.1, 0.2], 0.99).unwrap();
        let b = score_confidence_interval(&[5.0, 5.1, 5.2], 0.99).unwrap();
        assert!(a.disjoint(&b) && b.disjoint(&a));
        assert!(!a.disjoint(&a));
    }

    #[test]
    fn zero_misclassifications_are_unavailable() {
        let s = ScorerScores {
            scorer: "abet".into(),
            id: vec![0.1, 0.2, 0.3],
            ood: vec![0.5, 0.6],
        };
        let b = misclassified_split_eval(&[0, 1, 2], &[0, 1, 2], &[s]).unwrap();
        assert_eq!((b.n_correct, b.n_misclassified), (3, 0));
        assert_eq!(b.scorers[0].fpr95_mis_vs_ood, None);
        assert_eq!(b.scorers[0].fpr95_correct_vs_ood, Some(0.0));
        let json = serde_json::to_string(&b).unwrap();
        assert!(json.contains("\"fpr95_mis_vs_ood\":null"));
    }

    #[test]
    fn split_uses_correctness() {
        // misclassified ID samples look OOD-like
        let s = ScorerScores {
            scorer: "msp".into(),
            id: vec![-0.9, -0.8, -0.3, -0.2],
            ood: vec![-0.35, -0.25, -0.1],
        };
        let b = misclassified_split_eval(&[0, 1, 0, 0], &[0, 1, 1, 1], &[s]).unwrap();
        assert_eq!((b.n_correct, b.n_misclassified), (2, 2));
        let f = &b.scorers[0];
        assert_eq!(f.fpr95_correct_vs_ood, Some(0.0));
        assert!(f.fpr95_mis_vs_ood.unwrap() > 0.0);
        assert!(misclassified_split_eval(&[0], &[0, 1], &[]).is_err());
    }

    #[test]
    fn proximal_identity_case() {
        let id = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0], vec![5.0, 5.0]]).unwrap();
        let correct = [true, false, true, true];
        let r = ood_proximal_accuracy(&id, &correct, &id).unwrap();
        assert_eq!(r.proximal_accuracy, r.overall_accuracy);
        assert_eq!(r.overall_accuracy, 0.75);
        // equidistant query goes to the lower index
        assert_eq!(nearest_row(&id, &[0.5, 0.0]), 0);
        let q = Matrix::from_rows(&[vec![0.9, 0.0], vec![1.1, 0.1]]).unwrap();
        assert_eq!(ood_proximal_accuracy(&id, &correct, &q).unwrap().proximal_accuracy, 0.0);
    }

    #[test]
    fn nearest_matches_brute_force_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = |n: usize| Matrix::new(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (id, ood) = (m(2000), m(2000));
        let correct: Vec<bool> = (0..2000).map(|i| i % 3 != 0).collect();
        let mut hits = 0;
        for q in ood.iter_rows() {
            let mut all: Vec<(f64, usize)> = id.iter_rows().enumerate().map(|(i, r)| (squared_distance(q, r), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            assert_eq!(nearest_row(&id, q), all[0].1);
            hits += correct[all[0].1] as usize;
        }
        let r = ood_proximal_accuracy(&id, &correct, &ood).unwrap();
        assert_eq!(r.proximal_accuracy, hits as f64 / 2000.0);
    }

    proptest! {
        #[test]
        fn full_fpr_within_split_hull(
            id in prop::collection::vec((-5i32..5, any::<bool>()), 2..60),
            ood in prop::collection::vec(-5i32..5, 1..40),
            target in 0.05f64..1.0,
        ) {
            prop_assume!(id.iter().any(|x| x.1) && id.iter().any(|x| !x.1));
            let s = ScorerScores {
                scorer: "x".into(),
                id: id.iter().map(|x| x.0 as f64).collect(),
                ood: ood.iter().map(|&x| x as f64).collect(),
            };
            let correct: Vec<bool> = id.iter().map(|x| x.1).collect();
            let (a, b, full) = split_fpr_with_full(&s, &correct, target).unwrap();
            prop_assert!(full >= a.min(b) && full <= a.max(b), "{a} {b} {full}");
        }

        #[test]
        fn breakdown_counts_sum(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..50)) {
            let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let s = ScorerScores { scorer: "x".into(), id: vec![0.0; p.len()], ood: vec![1.0] };
            let b = misclassified_split_eval(&p, &y, &[s]).unwrap();
            prop_assert_eq!(b.n_correct + b.n_misclassified, p.len());
            for v in [b.scorers[0].fpr95_correct_vs_ood, b.scorers[0].fpr95_mis_vs_ood].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
