//! The full synth/ingest → train → extract → score → eval → analyze chain.

use std::path::Path;
use std::time::Instant;

use abet_core::analysis::{
    misclassified_split_eval, ood_proximal_accuracy, score_confidence_interval, ScorerScores,
};
use abet_core::dataset_io::{split, write_atomic, write_fdump, FeatureDump, LabeledDataset};
use abet_core::metrics::{
    auroc_exact, build_histograms, evaluate_exact, metrics_from_histograms, Normalizer, Positive, ScoredSet,
};
use abet_core::model::{
    self, argmax_rows, extract, init_params, names, save_checkpoint, EpochRecord, ModelConfig, ModelParams,
};
use abet_core::numerics::{norm, Matrix};
use abet_core::scorers::{
    fit_scorer, score_batch, FittedScorer, PosthocConfig, ScorerId, Transform, TransformContext,
};
use abet_core::Result;

use crate::config::{RunConfig, ScorerEntry};
use crate::report::{
    AnalysisDocument, AnalysisReport, DatasetSummary, EpochLogDocument, IntervalReport, MetricsPair,
    ParameterCounts, RunReport, ScorerResult, StageTime, Timing, TrainingSummary, ANALYSIS_SCHEMA,
    EPOCH_LOG_SCHEMA, RUN_REPORT_SCHEMA,
};
use crate::svg::histogram_svg;

/// OOD synthetic data draws from its own seed so it never mirrors the ID draw.
pub const OOD_SEED_OFFSET: u64 = 1000;

pub struct ScoreSet {
    pub label: String,
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
}

pub struct RunOutputs {
    pub report: RunReport,
    pub params: ModelParams,
    pub model_config: ModelConfig,
    pub id_test: FeatureDump,
    pub ood: FeatureDump,
    pub scores: Vec<ScoreSet>,
}

struct Stopwatch(Vec<StageTime>);

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.0.push(StageTime {
            stage: stage.into(),
            ms: t.elapsed().as_secs_f64() * 1e3,
        });
        Ok(out)
    }
}

fn max_norm(m: &Matrix) -> f64 {
    m.iter_rows().map(norm).fold(0.0, f64::max)
}

fn labeled(params: &ModelParams, ds: &LabeledDataset) -> Result<FeatureDump> {
    let mut d = extract(params, ds.features())?;
    d.labels = Some(ds.labels().iter().map(|&l| l as u32).collect());
    Ok(d)
}

/// Exact and histogram metrics for one scorer's oodness scores.
pub fn evaluate(scores: &ScoredSet, normalizer: Normalizer, bins: usize) -> Result<MetricsPair> {
    Ok(MetricsPair {
        exact: evaluate_exact(scores, Positive::Id),
        histogram: metrics_from_histograms(&build_histograms(scores, normalizer, bins)?, Positive::Id)?,
    })
}

/// abet AUROC of (ID, OOD) under the current parameters.
pub fn abet_auroc(params: &ModelParams, id: &Matrix, ood: &Matrix) -> Result<f64> {
    let cfg = PosthocConfig::default();
    let score = |x: &Matrix| {
        score_batch(
            ScorerId::Abet,
            &extract(params, x)?,
            &FittedScorer::None,
            &cfg,
            &Transform::None,
            &TransformContext::default(),
        )
    };
    Ok(auroc_exact(&ScoredSet::new(score(id)?, score(ood)?)?, Positive::Id))
}

pub struct ScoringInputs<'a> {
    pub params: &'a ModelParams,
    pub id_train: &'a FeatureDump,
    pub id_test: &'a FeatureDump,
    pub ood: &'a FeatureDump,
    pub id_test_inputs: &'a Matrix,
    pub ood_inputs: &'a Matrix,
}

/// Fits and applies one configured scorer to ID test and OOD outputs.
pub fn score_entry(entry: &ScorerEntry, cfg: &PosthocConfig, inp: &ScoringInputs<'_>) -> Result<ScoreSet> {
    let fitted = fit_scorer(entry.scorer, inp.id_train, cfg)?;
    let transform = Transform::fit(&entry.transform, inp.params, Some(inp.id_train), cfg)?;
    let run = |dump: &FeatureDump, inputs: &Matrix| {
        let ctx = TransformContext {
            params: Some(inp.params),
            inputs: Some(inputs),
            freeze_temperature: cfg.freeze_temperature,
        };
        score_batch(entry.scorer, dump, &fitted, cfg, &transform, &ctx)
    };
    Ok(ScoreSet {
        label: entry.label(),
        id: run(inp.id_test, inp.id_test_inputs)?,
        ood: run(inp.ood, inp.ood_inputs)?,
    })
}

/// Misclassified/correct breakdown, OOD-proximal accuracy and abet intervals.
pub fn analyze(
    id_test: &FeatureDump,
    labels: &[usize],
    ood: &FeatureDump,
    scorers: &[ScorerId],
    level: f64,
) -> Result<AnalysisReport> {
    let preds = argmax_rows(&id_test.matrix(names::PROBS)?);
    let cfg = PosthocConfig::default();
    let plain = |id: ScorerId, d: &FeatureDump| {
        score_batch(id, d, &FittedScorer::None, &cfg, &Transform::None, &TransformContext::default())
    };
    let mut sets = Vec::with_capacity(scorers.len());
    for &s in scorers {
        sets.push(ScorerScores {
            scorer: s.to_string(),
            id: plain(s, id_test)?,
            ood: plain(s, ood)?,
        });
    }
    let breakdown = misclassified_split_eval(&preds, labels, &sets)?;
    let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, y)| p == y).collect();
    let proximal = ood_proximal_accuracy(
        &id_test.matrix(names::PENULTIMATE)?,
        &correct,
        &ood.matrix(names::PENULTIMATE)?,
    )?;
    let abet = plain(ScorerId::Abet, id_test)?;
    let (mut ok, mut bad) = (Vec::new(), Vec::new());
    for (s, c) in abet.into_iter().zip(&correct) {
        if *c { ok.push(s) } else { bad.push(s) }
    }
    let ci = |v: &[f64]| if v.len() >= 2 { score_confidence_interval(v, level).map(Some) } else { Ok(None) };
    let (c_ok, c_bad) = (ci(&ok)?, ci(&bad)?);
    Ok(AnalysisReport {
        breakdown,
        proximal,
        intervals: IntervalReport {
            scorer: ScorerId::Abet.to_string(),
            disjoint: c_ok.zip(c_bad).map(|(a, b)| a.disjoint(&b)),
            correct: c_ok,
            misclassified: c_bad,
        },
    })
}

/// Runs everything in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunOutputs> {
    cfg.validate()?;
    let mut clock = Stopwatch(Vec::new());
    let (train_ds, test_ds, ood_ds) = clock.time("data", || {
        let id = cfg.data.id.load(cfg.seed, None)?;
        let ood = cfg
            .data
            .ood
            .load(cfg.seed.wrapping_add(OOD_SEED_OFFSET), Some(max_norm(id.features())))?;
        if ood.dim() != id.dim() {
            return Err(abet_core::Error::Dimension(format!(
                "OOD data has {} features, ID {}",
                ood.dim(),
                id.dim()
            )));
        }
        let (test, train) = split(&id, cfg.data.id_test_fraction, cfg.seed)?;
        Ok((train, test, ood))
    })?;

    let model_config = ModelConfig {
        input_dim: train_ds.dim(),
        hidden_sizes: cfg.model.hidden_sizes.clone(),
        penultimate_dim: cfg.model.penultimate_dim,
        num_classes: train_ds.num_classes(),
        head: cfg.model.head,
        seed: cfg.seed,
    };
    let outcome = clock.time("train", || {
        let params = init_params(&model_config)?;
        let mut hook = |p: &ModelParams, rec: &mut EpochRecord| -> Result<()> {
            rec.ood_auroc = Some(abet_auroc(p, test_ds.features(), ood_ds.features())?);
            Ok(())
        };
        let hook: Option<&mut model::EpochHook<'_>> = if cfg.data.epoch_hook { Some(&mut hook) } else { None };
        model::train(params, &train_ds, &cfg.train_config(), hook)
    })?;
    let params = outcome.params;

    let (id_train, id_test, ood) = clock.time("extract", || {
        Ok((labeled(&params, &train_ds)?, labeled(&params, &test_ds)?, extract(&params, ood_ds.features())?))
    })?;
    let branch_fraction = {
        let t = Instant::now();
        let _ = extract(&params, test_ds.features())?;
        let total = t.elapsed().as_secs_f64();
        let pen = id_test.matrix(names::PENULTIMATE)?;
        let t = Instant::now();
        let _ = model::temperatures(&params, &pen);
        let branch = t.elapsed().as_secs_f64();
        if total > 0.0 { branch / total } else { 0.0 }
    };

    let inputs = ScoringInputs {
        params: &params,
        id_train: &id_train,
        id_test: &id_test,
        ood: &ood,
        id_test_inputs: test_ds.features(),
        ood_inputs: ood_ds.features(),
    };
    let scores = clock.time("score", || {
        cfg.scorers.iter().map(|e| score_entry(e, &cfg.posthoc, &inputs)).collect::<Result<Vec<_>>>()
    })?;
    let classes = model_config.num_classes;
    let results = clock.time("eval", || {
        cfg.scorers
            .iter()
            .zip(&scores)
            .map(|(e, s)| {
                let set = ScoredSet::new(s.id.clone(), s.ood.clone())?;
                Ok(ScorerResult {
                    label: s.label.clone(),
                    scorer: e.scorer.to_string(),
                    transform: e.transform.clone(),
                    metrics: evaluate(&set, e.scorer.normalizer(classes), cfg.bins)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let analysis = if cfg.analysis.enabled {
        Some(clock.time("analyze", || {
            analyze(&id_test, test_ds.labels(), &ood, &cfg.analysis.scorers, cfg.analysis.level)
        })?)
    } else {
        None
    };

    let preds = argmax_rows(&id_test.matrix(names::PROBS)?);
    let test_acc = preds.iter().zip(test_ds.labels()).filter(|(p, y)| p == y).count() as f64 / test_ds.len() as f64;
    let report = RunReport {
        schema_version: RUN_REPORT_SCHEMA.into(),
        config: cfg.clone(),
        dataset: DatasetSummary {
            n_train: train_ds.len(),
            n_id_test: test_ds.len(),
            n_ood: ood_ds.len(),
            input_dim: train_ds.dim(),
            num_classes: classes,
        },
        parameters: ParameterCounts::of(&params),
        training: TrainingSummary {
            epochs: outcome.log,
            id_test_accuracy: test_acc,
        },
        scorers: results,
        analysis,
        timing: Timing {
            stages: clock.0,
            temperature_branch_fraction: branch_fraction,
        },
    };
    Ok(RunOutputs {
        report,
        params,
        model_config,
        id_test,
        ood,
        scores,
    })
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| abet_core::Error::Contract(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Score CSV: `index,<label>...` with one row per sample.
pub fn write_scores_csv(path: &Path, labels: &[&str], columns: &[&[f64]]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| abet_core::Error::io(path, std::io::Error::other(e));
    let mut header = vec!["index"];
    header.extend_from_slice(labels);
    w.write_record(&header).map_err(io)?;
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        let mut rec = vec![i.to_string()];
        rec.extend(columns.iter().map(|c| format!("{:?}", c[i])));
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| abet_core::Error::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

/// Every artifact of a run under `dir`.
pub fn write_artifacts(out: &RunOutputs, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| abet_core::Error::io(dir, e))?;
    save_checkpoint(&out.params, &out.model_config, &dir.join("checkpoint.json"))?;
    write_json(
        &dir.join("epoch_log.json"),
        &EpochLogDocument {
            schema_version: EPOCH_LOG_SCHEMA.into(),
            epochs: out.report.training.epochs.clone(),
        },
    )?;
    write_fdump(&out.id_test, &dir.join("id_test.fdump"))?;
    write_fdump(&out.ood, &dir.join("ood.fdump"))?;
    let labels: Vec<&str> = out.scores.iter().map(|s| s.label.as_str()).collect();
    for (side, pick) in [("id", true), ("ood", false)] {
        let cols: Vec<&[f64]> = out
            .scores
            .iter()
            .map(|s| if pick { s.id.as_slice() } else { s.ood.as_slice() })
            .collect();
        write_scores_csv(&dir.join(format!("{side}_scores.csv")), &labels, &cols)?;
        let mut dump = FeatureDump::default();
        for (l, c) in labels.iter().zip(&cols) {
            dump.push_vector(&format!("scores_{l}"), c)?;
        }
        write_fdump(&dump, &dir.join(format!("{side}_scores.fdump")))?;
    }
    if let Some(a) = &out.report.analysis {
        write_json(
            &dir.join("analysis.json"),
            &AnalysisDocument {
                schema_version: ANALYSIS_SCHEMA.into(),
                analysis: a.clone(),
            },
        )?;
    }
    if let (Some(first), Some(res)) = (out.scores.first(), out.report.scorers.first()) {
        let title = format!("{} oodness, AUROC {:.4}", first.label, res.metrics.exact.auroc);
        write_atomic(
            &dir.join("report.svg"),
            histogram_svg(&title, &first.id, &first.ood, out.report.config.bins).as_bytes(),
        )?;
    }
    write_json(&dir.join("run_report.json"), &out.report)
}
