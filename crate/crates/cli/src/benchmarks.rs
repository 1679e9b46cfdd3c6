//! Desk-scale benchmark configurations.

use std::path::Path;

use abet_core::dataset_io::{SyntheticKind, SyntheticSpec};
use abet_core::model::TrainConfig;
use abet_core::scorers::{PosthocConfig, ScorerId};

use crate::config::{AnalysisSection, DataSection, DataSource, ModelSection, RunConfig, ScorerEntry};

fn entries(ids: &[ScorerId]) -> Vec<ScorerEntry> {
    ids.iter()
        .map(|&scorer| ScorerEntry {
            scorer,
            transform: "none".into(),
        })
        .collect()
}

fn blobs(dims: usize, classes: usize, separation: f64, noise: f64, samples: usize) -> DataSource {
    DataSource::Synthetic {
        spec: SyntheticSpec {
            kind: SyntheticKind::Blobs,
            dims,
            classes,
            separation,
            noise,
            samples,
            seed: 0,
        },
        relative_radii: false,
    }
}

fn ood(kind: SyntheticKind, dims: usize, samples: usize, relative_radii: bool) -> DataSource {
    DataSource::Synthetic {
        spec: SyntheticSpec {
            kind,
            dims,
            classes: 1,
            separation: 0.0,
            noise: 0.0,
            samples,
            seed: 0,
        },
        relative_radii,
    }
}

fn base(seed: u64, data: DataSection, scorers: &[ScorerId], analysis: bool) -> RunConfig {
    RunConfig {
        seed,
        model: ModelSection::default(),
        train: TrainConfig::default(),
        data,
        scorers: entries(scorers),
        posthoc: PosthocConfig::default(),
        bins: abet_core::metrics::DEFAULT_BINS,
        analysis: AnalysisSection {
            enabled: analysis,
            ..AnalysisSection::default()
        },
    }
}

/// Well-separated 16-D blobs (3 classes) against a spherical shell lying
/// strictly outside every ID sample (radii 1.05-1.5x the largest ID norm).
pub fn blobs_vs_ring(seed: u64) -> RunConfig {
    let data = DataSection {
        id: blobs(16, 3, 8.0, 1.0, 2000),
        ood: ood(
            SyntheticKind::Ring {
                inner_radius: 1.05,
                outer_radius: 1.5,
            },
            16,
            600,
            true,
        ),
        id_test_fraction: 0.3,
        epoch_hook: false,
    };
    base(seed, data, &[ScorerId::Abet, ScorerId::EnergyEq1], false)
}

/// Overlapping 16-D blobs (test accuracy around 0.9) against uniform samples
/// from the box spanning the blob centers.
pub fn overlapping_blobs(seed: u64) -> RunConfig {
    let data = DataSection {
        id: blobs(16, 3, 2.5, 1.0, 3000),
        ood: ood(SyntheticKind::UniformBox { half_width: 2.5 }, 16, 600, false),
        id_test_fraction: 0.3,
        epoch_hook: false,
    };
    base(seed, data, &[ScorerId::Msp, ScorerId::Energy, ScorerId::Abet], true)
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

/// Standard IDX file names under `dir`, if both exist.
pub fn idx_pair(dir: &Path) -> Option<DataSource> {
    let images = dir.join(MNIST_TRAIN_IMAGES);
    let labels = dir.join(MNIST_TRAIN_LABELS);
    (images.exists() && labels.exists()).then_some(DataSource::Idx { images, labels })
}

/// MNIST as ID with the per-epoch abet AUROC hook; OOD is a second IDX set
/// (FashionMNIST layout) when given, else uniform noise over the pixel box.
pub fn mnist_saturation(seed: u64, mnist: DataSource, ood_source: Option<DataSource>, epochs: usize) -> RunConfig {
    let data = DataSection {
        id: mnist,
        ood: ood_source.unwrap_or_else(|| ood(SyntheticKind::UniformBox { half_width: 1.0 }, 784, 2000, false)),
        id_test_fraction: 0.1,
        epoch_hook: true,
    };
    let mut cfg = base(seed, data, &[ScorerId::Abet], false);
    cfg.train = TrainConfig {
        epochs,
        batch_size: 128,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    cfg
}

/// `(peak AUROC before saturation, AUROC at the first epoch with train
/// accuracy above `saturation`)` from an epoch log.
pub fn saturation_drop(log: &[abet_core::model::EpochRecord], saturation: f64) -> Option<(f64, f64)> {
    let sat = log.iter().position(|r| r.train_accuracy > saturation)?;
    let at_sat = log[sat].ood_auroc?;
    let peak = log[..=sat].iter().filter_map(|r| r.ood_auroc).fold(f64::NEG_INFINITY, f64::max);
    Some((peak, at_sat))
}
