//! Verb implementations behind the `abet` binary.

use std::path::{Path, PathBuf};

use abet_core::dataset_io::{read_fdump, write_atomic, write_fdump, LabeledDataset, SyntheticSpec};
use abet_core::metrics::{auroc_exact, Normalizer, Positive, ScoredSet};
use abet_core::model::{self, init_params, load_checkpoint, save_checkpoint, ModelConfig};
use abet_core::scorers::{fit_scorer, score_batch, PosthocConfig, ScorerId, Transform, TransformContext};
use abet_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::config::{ModelSection, RunConfig};
use crate::pipeline::{self, evaluate, write_json, write_scores_csv};
use crate::report::{AnalysisDocument, EpochLogDocument, MetricsDocument, ANALYSIS_SCHEMA, EPOCH_LOG_SCHEMA, METRICS_SCHEMA};
use crate::svg::histogram_svg;

#[derive(Debug, Parser)]
#[command(name = "abet", version, about = "Learned-temperature energy OOD scoring")]
pub struct Cli {
    /// JSON configuration for the verb.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (config: synthetic spec) as FDUMP.
    Synth {
        #[arg(long, default_value = "synth")]
        name: String,
    },
    /// Train a model (config: run config; only seed/model/train are read).
    Train(TrainArgs),
    /// Write eval-mode model outputs for a dataset as FDUMP.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "features")]
        name: String,
    },
    /// Score model outputs (config: post-hoc settings).
    Score(ScoreArgs),
    /// Exact and histogram metrics from two score CSVs.
    Eval(EvalArgs),
    /// Misclassified breakdown, proximal accuracy and score intervals.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        /// Labeled ID test dataset (FDUMP).
        #[arg(long)]
        id_data: PathBuf,
        #[arg(long)]
        ood_data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "msp,energy,abet")]
        scorers: Vec<String>,
        #[arg(long, default_value_t = 0.99)]
        level: f64,
    },
    /// Overlaid ID/OOD histogram SVG with the AUROC in the title.
    Report(ReportArgs),
    /// The whole pipeline from a run config; writes every artifact and run_report.json.
    Run {
        /// Zero wall-clock fields in run_report.json.
        #[arg(long)]
        normalized: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled training dataset (FDUMP).
    #[arg(long)]
    pub data: PathBuf,
    /// OOD dataset for the per-epoch abet AUROC hook.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    /// ID evaluation set for the hook (defaults to the training data).
    #[arg(long)]
    pub id_eval: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Model outputs to score.
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "abet")]
    pub scorers: Vec<String>,
    /// ID training outputs for fitted scorers and transforms.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Raw inputs matching `--dump`, for ODIN.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    pub transform: String,
    #[arg(long, default_value = "scores")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormalizerArg {
    Minmax,
    Analytic,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: PathBuf,
    /// Score column (defaults to the first after `index`).
    #[arg(long)]
    pub column: Option<String>,
    /// Inputs are ID-ness (higher = more ID) rather than OOD-ness.
    #[arg(long)]
    pub higher_is_id: bool,
    #[arg(long, value_enum, default_value = "minmax")]
    pub normalizer: NormalizerArg,
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    #[arg(long, default_value_t = abet_core::metrics::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "id")]
    pub auprc_positive: PositiveArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PositiveArg {
    Id,
    Ood,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: PathBuf,
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
}

/// Exit codes: 2 config/validation, 3 I/O or malformed file, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        e if e.is_numerical() => 4,
        _ => 2,
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match exit_code(e) {
        3 => "io",
        4 => "numerical",
        _ => "config",
    }
}

/// One-line JSON for the diagnostic stream.
pub fn error_line(e: &Error) -> String {
    let path = match e {
        Error::Io { path, .. } | Error::Format { path, .. } => Some(path.display().to_string()),
        _ => None,
    };
    serde_json::json!({
        "error": {
            "code": exit_code(e),
            "kind": error_kind(e),
            "message": e.to_string(),
            "path": path,
        }
    })
    .to_string()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(path, e.column() as u64, format!("line {}: {e}", e.line()))
    })
}

fn require_config(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| Error::Domain("this verb needs --config".into()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::from_dump(&read_fdump(path)?, None)
}

/// Runs one parsed invocation, returning the artifact paths written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    ensure_dir(&cli.out)?;
    match &cli.command {
        Command::Synth { name } => {
            let mut spec: SyntheticSpec = read_json(require_config(cli)?)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let ds = abet_core::dataset_io::gen_synthetic(&spec)?;
            let path = cli.out.join(format!("{name}.fdump"));
            write_fdump(&ds.to_dump(), &path)?;
            Ok(vec![path])
        }
        Command::Train(args) => train(cli, args),
        Command::Extract { model, data, name } => {
            let (params, _) = load_checkpoint(model)?;
            let ds = read_fdump(data)?;
            let features = ds.matrix("features")?;
            let mut out = model::extract(&params, &features)?;
            out.labels = ds.labels.clone();
            let path = cli.out.join(format!("{name}.fdump"));
            write_fdump(&out, &path)?;
            Ok(vec![path])
        }
        Command::Score(args) => score(cli, args),
        Command::Eval(args) => eval(cli, args),
        Command::Analyze {
            model,
            id_data,
            ood_data,
            scorers,
            level,
        } => {
            let (params, _) = load_checkpoint(model)?;
            let id = load_dataset(id_data)?;
            let ood = read_fdump(ood_data)?.matrix("features")?;
            let ids = scorers.iter().map(|s| s.parse()).collect::<Result<Vec<ScorerId>>>()?;
            let analysis = pipeline::analyze(
                &model::extract(&params, id.features())?,
                id.labels(),
                &model::extract(&params, &ood)?,
                &ids,
                *level,
            )?;
            let path = cli.out.join("analysis.json");
            write_json(
                &path,
                &AnalysisDocument {
                    schema_version: ANALYSIS_SCHEMA.into(),
                    analysis,
                },
            )?;
            Ok(vec![path])
        }
        Command::Report(args) => {
            let (label, id) = read_score_column(&args.id, args.column.as_deref())?;
            let (_, ood) = read_score_column(&args.ood, Some(&label))?;
            let auroc = auroc_exact(&ScoredSet::new(id.clone(), ood.clone())?, Positive::Id);
            let path = cli.out.join("report.svg");
            let svg = histogram_svg(&format!("{label} oodness, AUROC {auroc:.4}"), &id, &ood, args.bins);
            write_atomic(&path, svg.as_bytes())?;
            Ok(vec![path])
        }
        Command::Run { normalized } => {
            let mut cfg = RunConfig::load(require_config(cli)?)?;
            if let Some(s) = cli.seed {
                cfg = cfg.with_seed(s);
            }
            let mut out = pipeline::execute(&cfg)?;
            if *normalized {
                out.report = out.report.normalized();
            }
            pipeline::write_artifacts(&out, &cli.out)?;
            Ok(vec![cli.out.join("run_report.json")])
        }
    }
}

#[derive(Debug, Deserialize)]
struct TrainFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: abet_core::model::TrainConfig,
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<Vec<PathBuf>> {
    let mut tf: TrainFile = match &cli.config {
        Some(p) => read_json(p)?,
        None => serde_json::from_str("{}").expect("empty train config"),
    };
    if let Some(s) = cli.seed {
        tf.seed = s;
    }
    let ds = load_dataset(&args.data)?;
    let cfg = ModelConfig {
        input_dim: ds.dim(),
        hidden_sizes: tf.model.hidden_sizes.clone(),
        penultimate_dim: tf.model.penultimate_dim,
        num_classes: ds.num_classes(),
        head: tf.model.head,
        seed: tf.seed,
    };
    let tc = abet_core::model::TrainConfig {
        shuffle_seed: tf.seed,
        ..tf.train
    };
    let ood = args.ood.as_deref().map(|p| read_fdump(p)?.matrix("features")).transpose()?;
    let id_eval = match &args.id_eval {
        Some(p) => read_fdump(p)?.matrix("features")?,
        None => ds.features().clone(),
    };
    let outcome = match &ood {
        Some(ood) => {
            let mut hook = |p: &abet_core::model::ModelParams, r: &mut abet_core::model::EpochRecord| -> Result<()> {
                r.ood_auroc = Some(pipeline::abet_auroc(p, &id_eval, ood)?);
                Ok(())
            };
            model::train(init_params(&cfg)?, &ds, &tc, Some(&mut hook))?
        }
        None => model::train(init_params(&cfg)?, &ds, &tc, None)?,
    };
    let ckpt = cli.out.join("checkpoint.json");
    save_checkpoint(&outcome.params, &cfg, &ckpt)?;
    let log = cli.out.join("epoch_log.json");
    write_json(
        &log,
        &EpochLogDocument {
            schema_version: EPOCH_LOG_SCHEMA.into(),
            epochs: outcome.log,
        },
    )?;
    Ok(vec![ckpt, log])
}

fn score(cli: &Cli, args: &ScoreArgs) -> Result<Vec<PathBuf>> {
    let posthoc: PosthocConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => PosthocConfig::default(),
    };
    posthoc.validate()?;
    let ids = args.scorers.iter().map(|s| s.parse()).collect::<Result<Vec<ScorerId>>>()?;
    let dump = read_fdump(&args.dump)?;
    let fit_dump = args.fit.as_deref().map(read_fdump).transpose()?;
    let params = args.model.as_deref().map(|p| load_checkpoint(p).map(|c| c.0)).transpose()?;
    let inputs = args
        .inputs
        .as_deref()
        .map(|p| read_fdump(p)?.matrix("features"))
        .transpose()?;
    let transform = if args.transform == "none" {
        Transform::None
    } else {
        let p = params
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("transform {:?} needs --model", args.transform)))?;
        Transform::fit(&args.transform, p, fit_dump.as_ref(), &posthoc)?
    };
    let ctx = TransformContext {
        params: params.as_ref(),
        inputs: inputs.as_ref(),
        freeze_temperature: posthoc.freeze_temperature,
    };
    let mut columns = Vec::with_capacity(ids.len());
    for &id in &ids {
        let fitted = if id.needs_fit() {
            let fd = fit_dump
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("{id} needs --fit with ID training outputs")))?;
            fit_scorer(id, fd, &posthoc)?
        } else {
            Default::default()
        };
        columns.push(score_batch(id, &dump, &fitted, &posthoc, &transform, &ctx)?);
    }
    let labels: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let col_refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    let csv_path = cli.out.join(format!("{}.csv", args.name));
    write_scores_csv(&csv_path, &label_refs, &col_refs)?;
    let mut fd = abet_core::dataset_io::FeatureDump::default();
    for (l, c) in labels.iter().zip(&columns) {
        fd.push_vector(&format!("scores_{l}"), c)?;
    }
    let fd_path = cli.out.join(format!("{}.fdump", args.name));
    write_fdump(&fd, &fd_path)?;
    Ok(vec![csv_path, fd_path])
}

/// Reads one score column from an `index,<label>...` CSV.
pub fn read_score_column(path: &Path, column: Option<&str>) -> Result<(String, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let headers = r
        .headers()
        .map_err(|e| Error::format(path, 0, e.to_string()))?
        .clone();
    let idx = match column {
        Some(c) => headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::format(path, 0, format!("no column {c:?}")))?,
        None if headers.len() >= 2 => 1,
        None => return Err(Error::format(path, 0, "expected index and score columns")),
    };
    let label = headers[idx].to_string();
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, line as u64 + 2, e.to_string()))?;
        let v: f64 = rec
            .get(idx)
            .ok_or_else(|| Error::format(path, line as u64 + 2, "short row"))?
            .trim()
            .parse()
            .map_err(|e| Error::format(path, line as u64 + 2, format!("bad score: {e}")))?;
        values.push(v);
    }
    Ok((label, values))
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<Vec<PathBuf>> {
    let (label, mut id) = read_score_column(&args.id, args.column.as_deref())?;
    let (_, mut ood) = read_score_column(&args.ood, Some(&label))?;
    let mut normalizer = match args.normalizer {
        NormalizerArg::Minmax => Normalizer::MinMax,
        NormalizerArg::Analytic => Normalizer::Analytic {
            lo: args.lo.ok_or_else(|| Error::Domain("analytic normalizer needs --lo".into()))?,
            hi: args.hi.ok_or_else(|| Error::Domain("analytic normalizer needs --hi".into()))?,
        },
    };
    if args.higher_is_id {
        id.iter_mut().for_each(|v| *v = -*v);
        ood.iter_mut().for_each(|v| *v = -*v);
        if let Normalizer::Analytic { lo, hi } = normalizer {
            normalizer = Normalizer::Analytic { lo: -hi, hi: -lo };
        }
    }
    let set = ScoredSet::new(id, ood)?;
    let mut metrics = evaluate(&set, normalizer, args.bins)?;
    if let PositiveArg::Ood = args.auprc_positive {
        metrics.exact.auprc = abet_core::metrics::auprc_exact(&set, Positive::Ood);
        metrics.exact.auprc_positive = Positive::Ood;
        let h = abet_core::metrics::build_histograms(&set, normalizer, args.bins)?;
        metrics.histogram = abet_core::metrics::metrics_from_histograms(&h, Positive::Ood)?;
    }
    let path = cli.out.join("metrics.json");
    write_json(
        &path,
        &MetricsDocument {
            schema_version: METRICS_SCHEMA.into(),
            scorer: label,
            metrics,
        },
    )?;
    Ok(vec![path])
}
