use abet_core::analysis::{ConfidenceInterval, MisclassifiedBreakdown, ProximalAccuracy};
use abet_core::metrics::MetricsReport;
use abet_core::model::{EpochRecord, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RUN_REPORT_SCHEMA: &str = "abet.run_report.v1";
pub const METRICS_SCHEMA: &str = "abet.metrics.v1";
pub const ANALYSIS_SCHEMA: &str = "abet.analysis.v1";
pub const EPOCH_LOG_SCHEMA: &str = "abet.epoch_log.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsPair {
    pub exact: MetricsReport,
    pub histogram: MetricsReport,
}

/// What `eval` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub schema_version: String,
    pub scorer: String,
    #[serde(flatten)]
    pub metrics: MetricsPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub penultimate_dim: usize,
    pub baseline_trainable: usize,
    pub with_temperature_trainable: usize,
    /// `w_t` (p), `b_t`, `gamma`, `beta`.
    pub temperature_trainable: usize,
    /// Running mean and variance.
    pub temperature_buffers: usize,
}

impl ParameterCounts {
    pub fn of(params: &ModelParams) -> Self {
        let base = params.trainable_count(false);
        let with = params.trainable_count(true);
        ParameterCounts {
            penultimate_dim: params.penultimate_dim(),
            baseline_trainable: base,
            with_temperature_trainable: with,
            temperature_trainable: with - base,
            temperature_buffers: params.buffer_count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_train: usize,
    pub n_id_test: usize,
    pub n_ood: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: Vec<EpochRecord>,
    pub id_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerResult {
    pub label: String,
    pub scorer: String,
    pub transform: String,
    #[serde(flatten)]
    pub metrics: MetricsPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub scorer: String,
    pub correct: Option<ConfidenceInterval>,
    pub misclassified: Option<ConfidenceInterval>,
    /// `None` unless both intervals exist.
    pub disjoint: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub breakdown: MisclassifiedBreakdown,
    pub proximal: ProximalAccuracy,
    pub intervals: IntervalReport,
}

/// `analyze` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDocument {
    pub schema_version: String,
    #[serde(flatten)]
    pub analysis: AnalysisReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLogDocument {
    pub schema_version: String,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<StageTime>,
    /// Eval-mode temperature branch time over the full ID-test forward time.
    /// Reported only; machine dependent.
    pub temperature_branch_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub parameters: ParameterCounts,
    pub training: TrainingSummary,
    pub scorers: Vec<ScorerResult>,
    pub analysis: Option<AnalysisReport>,
    pub timing: Timing,
}

impl RunReport {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn normalized(&self) -> RunReport {
        let mut r = self.clone();
        for s in &mut r.timing.stages {
            s.ms = 0.0;
        }
        r.timing.temperature_branch_fraction = 0.0;
        r
    }

    pub fn scorer(&self, label: &str) -> Option<&ScorerResult> {
        self.scorers.iter().find(|s| s.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
