//! Command-line interface for cascade popularity prediction.
//!
//! Subcommands cover the whole workflow: synthesize cascades, window and
//! split them, train the attention model, evaluate, predict, verify
//! gradients, dump attention traces, and fit the feature-linear baseline.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 numerical failure,
//! 3 I/O error. Log verbosity comes from the `TCAN_LOG` env var.

mod manifest;

use clap::{Args, Parser, Subcommand};
use manifest::ManifestBuilder;
use serde::Serialize;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use tcan::baseline::{constant_log_mean_baseline, feature_baseline, feature_baseline_grid};
use tcan::cascade::{filter_by_publish_time, format_cascade_file, parse_cascade_file};
use tcan::gradcheck;
use tcan::metrics::EvalReport;
use tcan::model::{ModelConfig, TcanModel, Variant};
use tcan::synth::{generate, GenConfig};
use tcan::train::{evaluate, train, TrainOptions};
use tcan::views::{
    build_views, filter_dataset, read_views_jsonl, split_dataset, write_views_jsonl,
    CascadeViews, DatasetSplit, SplitMeta,
};
use tcan::{Error, Result};

#[derive(Parser)]
#[command(name = "tcan", version, about = "Information-cascade popularity prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cascade corpus.
    Gen(GenArgs),
    /// Parse cascades, build observation windows, filter, and split.
    Prepare(PrepareArgs),
    /// Train a model on a prepared split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared split.
    Eval(EvalArgs),
    /// Predict incremental popularity for raw cascades.
    Predict(PredictArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump attention scores and the cascade representation for one cascade.
    Explain(ExplainArgs),
    /// Fit and evaluate the hand-crafted-feature ridge baseline.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct GenArgs {
    /// TOML file with generator settings (all fields optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output cascade file.
    #[arg(long)]
    out: PathBuf,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrepareArgs {
    /// Input cascade file.
    #[arg(long)]
    input: PathBuf,
    /// Observation cutoff (dataset time units).
    #[arg(long)]
    t_obs: f64,
    /// Prediction horizon; the label counts joins in (t_obs, t_end].
    #[arg(long)]
    t_end: f64,
    /// Drop views observing fewer nodes than this.
    #[arg(long, default_value_t = 10)]
    min_obs: usize,
    /// Train/val/test ratios, comma separated.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    ratios: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Keep only cascades whose publish time lies in `lo:hi`.
    #[arg(long)]
    publish_range: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by `prepare`.
    #[arg(long)]
    split_dir: PathBuf,
    /// Model/training settings (TOML, all fields optional).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant: full, nt, pl, g, s, rnn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Worker threads for the per-epoch validation pass.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    split_dir: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which part of the split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Where to write report.json and predictions.csv (metrics print to
    /// stdout either way).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw cascade file; observation windows are rebuilt at --t-obs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    t_obs: f64,
    /// Output CSV of (id, y_hat).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional TOML config; its seed is used when --seed is absent.
    /// Checks run on reduced module dimensions so exhaustive central
    /// differences stay fast.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A views file produced by `prepare` (train/val/test.jsonl).
    #[arg(long)]
    views: PathBuf,
    #[arg(long)]
    cascade_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    split_dir: PathBuf,
    /// Ridge regularization strength.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Pick lambda from a small grid by validation MSLE instead.
    #[arg(long, default_value_t = false)]
    grid: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TCAN_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are validation errors (help/version print fine).
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Baseline(args) => cmd_baseline(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match &e {
            Error::Io(_) => 3,
            e if e.is_numerical() => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::Io)
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = match &args.config {
        Some(path) => toml::from_str(&read_to_string(path)?)
            .map_err(|e| Error::Config(format!("generator config: {e}")))?,
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let mut mb = ManifestBuilder::new("gen");
    mb.seed(cfg.seed).config(&cfg);
    if let Some(path) = &args.config {
        mb.input(path)?;
    }
    let cascades = generate(&cfg)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, format_cascade_file(&cascades))?;
    println!("wrote {} cascades to {}", cascades.len(), args.out.display());
    mb.output(&args.out);
    mb.write(args.out.parent().unwrap_or(Path::new(".")))?;
    Ok(())
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Validation(format!("bad ratios `{s}`")))?;
    if parts.len() != 3 {
        return Err(Error::Validation(format!("need exactly 3 ratios, got {}", parts.len())));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let ratios = parse_ratios(&args.ratios)?;
    let mut mb = ManifestBuilder::new("prepare");
    mb.seed(args.seed).input(&args.input)?;

    let file = fs::File::open(&args.input)?;
    let mut cascades = parse_cascade_file(BufReader::new(file))?;
    let total_parsed = cascades.len();
    if let Some(range) = &args.publish_range {
        let (lo, hi) = range
            .split_once(':')
            .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)))
            .ok_or_else(|| Error::Validation(format!("bad publish range `{range}`")))?;
        cascades = filter_by_publish_time(cascades, lo, hi);
    }
    let views: Vec<CascadeViews> = cascades
        .iter()
        .map(|c| build_views(c, args.t_obs, args.t_end))
        .collect::<Result<_>>()?;
    let kept = filter_dataset(views, args.min_obs);
    if kept.is_empty() {
        return Err(Error::Validation(format!(
            "no cascades with at least {} observed nodes (parsed {total_parsed})",
            args.min_obs
        )));
    }
    let split = split_dataset(kept, ratios, args.seed)?;

    fs::create_dir_all(&args.out_dir)?;
    let meta = SplitMeta {
        t_obs: args.t_obs,
        t_end: args.t_end,
        min_obs: args.min_obs,
        ratios,
        seed: args.seed,
        counts: [split.train.len(), split.val.len(), split.test.len()],
    };
    for (name, views) in
        [("train", &split.train), ("val", &split.val), ("test", &split.test)]
    {
        let path = args.out_dir.join(format!("{name}.jsonl"));
        let f = fs::File::create(&path)?;
        write_views_jsonl(BufWriter::new(f), views)?;
        mb.output(&path);
    }
    let meta_path = args.out_dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    mb.output(&meta_path);
    println!(
        "split sizes: train {}, val {}, test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    mb.config(&meta);
    mb.write(&args.out_dir)?;
    Ok(())
}

fn read_split(dir: &Path) -> Result<(DatasetSplit, SplitMeta)> {
    let meta: SplitMeta = serde_json::from_str(&read_to_string(&dir.join("meta.json"))?)?;
    let read = |name: &str| -> Result<Vec<CascadeViews>> {
        let f = fs::File::open(dir.join(format!("{name}.jsonl")))?;
        read_views_jsonl(BufReader::new(f))
    };
    let split = DatasetSplit {
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
        split_seed: meta.seed,
        ratios: meta.ratios,
    };
    Ok((split, meta))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ModelConfig::from_toml(&read_to_string(path)?)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &args.variant {
        cfg.variant = parse_variant(v)?;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(m) = args.max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = args.patience {
        cfg.patience = p;
    }
    if let Some(d) = args.dropout {
        cfg.dropout = d;
    }
    if let Some(w) = args.weight_decay {
        cfg.weight_decay = w;
    }
    cfg.validate()?;

    let mut mb = ManifestBuilder::new("train");
    mb.seed(cfg.seed).config(&cfg);
    if let Some(path) = &args.config {
        mb.input(path)?;
    }
    for name in ["train.jsonl", "val.jsonl", "test.jsonl", "meta.json"] {
        mb.input(&args.split_dir.join(name))?;
    }
    let (split, meta) = read_split(&args.split_dir)?;
    let opts = TrainOptions { t_obs: Some(meta.t_obs), workers: args.workers };
    let (model, history) = train(&split, &cfg, &opts)?;

    fs::create_dir_all(&args.out_dir)?;
    let ckpt_path = args.out_dir.join("checkpoint.json");
    model.save_to_path(&ckpt_path)?;
    let hist_path = args.out_dir.join("history.json");
    fs::write(&hist_path, serde_json::to_string_pretty(&history)?)?;
    println!(
        "trained {} epochs (best epoch {}, val msle {:.4}); checkpoint at {}",
        history.epochs.len(),
        history.best_epoch,
        history.best_val_msle,
        ckpt_path.display()
    );
    mb.output(&ckpt_path);
    mb.output(&hist_path);
    mb.write(&args.out_dir)?;
    Ok(())
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(Variant::Full),
        "nt" => Ok(Variant::Nt),
        "pl" => Ok(Variant::Pl),
        "g" => Ok(Variant::G),
        "s" => Ok(Variant::S),
        "rnn" => Ok(Variant::Rnn),
        other => Err(Error::Validation(format!("unknown variant `{other}`"))),
    }
}

fn write_report(report: &EvalReport, dir: &Path, mb: &mut ManifestBuilder) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, report.to_json()?)?;
    let csv_path = dir.join("predictions.csv");
    let f = fs::File::create(&csv_path)?;
    report.write_csv(BufWriter::new(f))?;
    mb.output(&json_path);
    mb.output(&csv_path);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("eval");
    mb.input(&args.checkpoint)?;
    let (split, _) = read_split(&args.split_dir)?;
    let views = match args.split.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => return Err(Error::Validation(format!("unknown split `{other}`"))),
    };
    let model = TcanModel::load_from_path(&args.checkpoint)?;
    let report = evaluate(&model, views, args.workers)?;
    println!(
        "{} split: msle {:.4}, mae {:.4}, r2 {:.4} ({} cascades)",
        args.split,
        report.msle,
        report.mae,
        report.r2,
        report.per_cascade.len()
    );
    if let Some(dir) = &args.out_dir {
        mb.config(&serde_json::json!({"split": args.split, "workers": args.workers}));
        write_report(&report, dir, &mut mb)?;
        mb.write(dir)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("predict");
    mb.input(&args.checkpoint)?.input(&args.input)?;
    let model = TcanModel::load_from_path(&args.checkpoint)?;
    let file = fs::File::open(&args.input)?;
    let cascades = parse_cascade_file(BufReader::new(file))?;
    let mut out = BufWriter::new(fs::File::create(&args.out)?);
    writeln!(out, "id,y_hat")?;
    for c in &cascades {
        // Observation-only view: the label interval is empty.
        let views = build_views(c, args.t_obs, args.t_obs)?;
        let y_hat = model.predict(&views)?;
        writeln!(out, "{},{}", c.id, y_hat)?;
    }
    out.flush()?;
    println!("wrote {} predictions to {}", cascades.len(), args.out.display());
    mb.config(&serde_json::json!({"t_obs": args.t_obs}));
    mb.output(&args.out);
    mb.write(args.out.parent().unwrap_or(Path::new(".")))?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let seed = match (args.seed, &args.config) {
        (Some(seed), _) => seed,
        (None, Some(path)) => ModelConfig::from_toml(&read_to_string(path)?)?.seed,
        (None, None) => ModelConfig::default().seed,
    };
    let report = gradcheck::run(seed)?;
    for e in &report.entries {
        println!("{:<24} max rel err {:.3e}", e.module, e.max_rel_error);
    }
    if report.all_within(gradcheck::MODULE_TOLERANCE) {
        println!("all modules within {:.0e}", gradcheck::MODULE_TOLERANCE);
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: max rel err {:.3e} exceeds {:.0e}",
            report.max_rel_error(),
            gradcheck::MODULE_TOLERANCE
        )))
    }
}

#[derive(Serialize)]
struct TraceEntry {
    layer: usize,
    head: usize,
    matrix: Vec<Vec<f64>>,
    node_order: Vec<String>,
}

#[derive(Serialize)]
struct ExplainOutput {
    cascade_id: String,
    prediction: f64,
    /// Input to the final prediction layer.
    representation: Vec<f64>,
    trace: Vec<TraceEntry>,
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("explain");
    mb.input(&args.checkpoint)?.input(&args.views)?;
    let model = TcanModel::load_from_path(&args.checkpoint)?;
    let f = fs::File::open(&args.views)?;
    let views = read_views_jsonl(BufReader::new(f))?;
    let view = views
        .iter()
        .find(|v| v.id == args.cascade_id)
        .ok_or_else(|| {
            Error::Validation(format!("cascade `{}` not found in views file", args.cascade_id))
        })?;
    let (prediction, trace, representation) = model.explain(view)?;
    let node_order = view.graph.nodes.clone();
    let mut entries = Vec::new();
    for (l, heads) in trace.layers.iter().enumerate() {
        for (h, matrix) in heads.iter().enumerate() {
            entries.push(TraceEntry {
                layer: l,
                head: h,
                matrix: (0..matrix.rows()).map(|r| matrix.row(r).to_vec()).collect(),
                node_order: node_order.clone(),
            });
        }
    }
    let output = ExplainOutput {
        cascade_id: view.id.clone(),
        prediction,
        representation,
        trace: entries,
    };
    fs::write(&args.out, serde_json::to_string_pretty(&output)?)?;
    println!(
        "explained `{}`: prediction {:.3}, {} trace matrices, representation dim {}",
        view.id,
        prediction,
        output.trace.len(),
        output.representation.len()
    );
    mb.config(&serde_json::json!({"cascade_id": args.cascade_id}));
    mb.output(&args.out);
    mb.write(args.out.parent().unwrap_or(Path::new(".")))?;
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("baseline");
    for name in ["train.jsonl", "val.jsonl", "test.jsonl", "meta.json"] {
        mb.input(&args.split_dir.join(name))?;
    }
    let (split, meta) = read_split(&args.split_dir)?;
    let (lambda, report) = if args.grid {
        feature_baseline_grid(
            &split,
            &[0.01, 0.03, 0.1, 0.3, 1.0],
            Some(meta.t_obs),
        )?
    } else {
        (args.lambda, feature_baseline(&split, args.lambda, Some(meta.t_obs))?)
    };
    let constant = constant_log_mean_baseline(&split)?;
    println!(
        "feature-linear (lambda {lambda}): msle {:.4}, mae {:.4}, r2 {:.4}",
        report.msle, report.mae, report.r2
    );
    println!(
        "constant log-mean predictor: msle {:.4}, mae {:.4}, r2 {:.4}",
        constant.msle, constant.mae, constant.r2
    );
    if let Some(dir) = &args.out_dir {
        mb.config(&serde_json::json!({"lambda": lambda, "grid": args.grid}));
        write_report(&report, dir, &mut mb)?;
        mb.write(dir)?;
    }
    Ok(())
}
