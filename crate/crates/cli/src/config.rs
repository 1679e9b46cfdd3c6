//! Run configuration: one JSON document, every field defaulted and echoed back
//! into the run report.

use std::path::{Path, PathBuf};

use abet_core::dataset_io::{read_fdump, LabeledDataset, SyntheticKind, SyntheticSpec};
use abet_core::model::{HeadKind, TrainConfig};
use abet_core::scorers::{PosthocConfig, ScorerId};
use abet_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const TRANSFORMS: [&str; 5] = ["none", "react", "dice", "ash", "odin"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated data; its seed is derived from the run seed.
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        /// Ring radii are multiples of the largest ID sample norm.
        #[serde(default)]
        relative_radii: bool,
    },
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { files: Vec<PathBuf> },
    Fdump { path: PathBuf },
}

impl DataSource {
    fn paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Synthetic { .. } => Vec::new(),
            DataSource::Idx { images, labels } => vec![images, labels],
            DataSource::Cifar { files } => files.iter().map(PathBuf::as_path).collect(),
            DataSource::Fdump { path } => vec![path],
        }
    }

    /// Loads the data; `id_max_norm` scales relative ring radii.
    pub fn load(&self, seed: u64, id_max_norm: Option<f64>) -> Result<LabeledDataset> {
        match self {
            DataSource::Synthetic { spec, relative_radii } => {
                let mut spec = spec.clone();
                spec.seed = seed;
                if *relative_radii {
                    if let SyntheticKind::Ring {
                        inner_radius,
                        outer_radius,
                    } = spec.kind
                    {
                        let m = id_max_norm.ok_or_else(|| {
                            Error::Contract("relative ring radii need an ID dataset".into())
                        })?;
                        spec.kind = SyntheticKind::Ring {
                            inner_radius: inner_radius * m,
                            outer_radius: outer_radius * m,
                        };
                    }
                }
                abet_core::dataset_io::gen_synthetic(&spec)
            }
            DataSource::Idx { images, labels } => abet_core::dataset_io::load_idx(images, labels),
            DataSource::Cifar { files } => {
                let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
                abet_core::dataset_io::load_cifar10_bin(&refs)
            }
            DataSource::Fdump { path } => LabeledDataset::from_dump(&read_fdump(path)?, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden_sizes: Vec<usize>,
    pub penultimate_dim: usize,
    pub head: HeadKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_sizes: vec![128],
            penultimate_dim: 64,
            head: HeadKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub id: DataSource,
    pub ood: DataSource,
    #[serde(default = "default_test_fraction")]
    pub id_test_fraction: f64,
    /// Record the abet AUROC on (ID test, OOD) after every epoch.
    #[serde(default)]
    pub epoch_hook: bool,
}

fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerEntry {
    pub scorer: ScorerId,
    #[serde(default = "default_transform")]
    pub transform: String,
}

fn default_transform() -> String {
    "none".into()
}

impl ScorerEntry {
    pub fn label(&self) -> String {
        if self.transform == "none" {
            self.scorer.to_string()
        } else {
            format!("{}+{}", self.scorer, self.transform)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    pub enabled: bool,
    pub scorers: Vec<ScorerId>,
    pub level: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            enabled: true,
            scorers: vec![ScorerId::Msp, ScorerId::Energy, ScorerId::Abet],
            level: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default = "default_scorers")]
    pub scorers: Vec<ScorerEntry>,
    #[serde(default)]
    pub posthoc: PosthocConfig,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_scorers() -> Vec<ScorerEntry> {
    [ScorerId::Abet, ScorerId::EnergyEq1, ScorerId::Energy, ScorerId::Msp]
        .into_iter()
        .map(|scorer| ScorerEntry {
            scorer,
            transform: default_transform(),
        })
        .collect()
}

fn default_bins() -> usize {
    abet_core::metrics::DEFAULT_BINS
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Domain(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Domain(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the global seed: model init, shuffling and splitting all follow it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            shuffle_seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.posthoc.validate()?;
        if self.model.penultimate_dim == 0 || self.model.hidden_sizes.contains(&0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        if !(self.data.id_test_fraction > 0.0 && self.data.id_test_fraction < 1.0) {
            return Err(Error::Domain("id_test_fraction must lie in (0, 1)".into()));
        }
        if self.scorers.is_empty() {
            return Err(Error::Domain("no scorers configured".into()));
        }
        if self.bins == 0 {
            return Err(Error::Domain("bins must be positive".into()));
        }
        for s in &self.scorers {
            if !TRANSFORMS.contains(&s.transform.as_str()) {
                return Err(Error::Domain(format!("unknown transform {:?}", s.transform)));
            }
        }
        abet_core::analysis::z_for_level(self.analysis.level)?;
        for src in [&self.data.id, &self.data.ood] {
            if let DataSource::Synthetic { spec, .. } = src {
                spec.validate()?;
            }
            for p in src.paths() {
                if !p.exists() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced data file does not exist"),
                    ));
                }
            }
        }
        Ok(())
    }
}
