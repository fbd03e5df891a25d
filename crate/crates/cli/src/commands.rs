use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use credassign::analysis::{
    channel_importance, cka_grid, concordance_report, gradient_angle, top_exemplars, write_activation_dump,
    write_montage, ActivationDump, Subset,
};
use credassign::bench::time_all;
use credassign::container::Container;
use credassign::data::{class_id, load_cifar10_with_seed, Dataset, Splits, CLASS_NAMES, DEFAULT_SPLIT_SEED};
use credassign::trainer::{evaluate, grid_search, train, Grid, TrainConfig, PROBE_BATCH};
use credassign::{Checkpoint, Error, FeedbackRule, Tensor};

pub const DATA_DIR_ENV: &str = "CREDASSIGN_DATA_DIR";

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { kind: "usage", code: 2, msg: msg.into() }
    }

    fn config(msg: impl Into<String>) -> Self {
        CliError { kind: "config", code: 6, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg: String = self
            .msg
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        write!(f, "error kind={} code={} msg={msg}", self.kind, self.code)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Io { .. } => ("io", 3),
            Error::Format { .. } | Error::Decode(_) => ("format", 4),
            Error::EmptySubset(_) => ("empty_subset", 5),
            Error::Config(_) | Error::Domain(_) => ("config", 6),
            Error::Diverged { .. } => ("diverged", 7),
            Error::Dimension(_) | Error::State(_) | Error::NonFinite(_) => ("internal", 1),
        };
        CliError { kind, code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "credassign", version, about = "Train and analyse networks under different credit-assignment rules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model; writes best.ckpt, last.ckpt and metrics.csv.
    Train(TrainArgs),
    /// Hyperparameter search with short probe runs; writes grid_results.csv and best_config.json.
    Grid(GridArgs),
    /// Evaluate a checkpoint; writes eval.json, predictions.csv and logits.bin.
    Eval(EvalArgs),
    /// Angle between exact and rule-delivered error signals on the probe batch.
    Angle(AngleArgs),
    /// Sign concordance between forward weights and fixed feedback.
    Sign(SignArgs),
    /// Layer-by-layer CKA between two models on a sample subset.
    Cka(CkaArgs),
    /// Rank conv channels by importance for one class.
    Channels(ChannelsArgs),
    /// Top-activating images for conv channels, as 3x3 montages.
    Exemplars(ExemplarsArgs),
    /// Time the backward pass of every rule.
    BenchBackward(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Method {
    Bp,
    FaRandom,
    FaToeplitz,
    UsfInit,
    UsfSn,
}

impl From<Method> for FeedbackRule {
    fn from(m: Method) -> Self {
        match m {
            Method::Bp => FeedbackRule::Bp,
            Method::FaRandom => FeedbackRule::FaRandom,
            Method::FaToeplitz => FeedbackRule::FaToeplitz,
            Method::UsfInit => FeedbackRule::UsfInit,
            Method::UsfSn => FeedbackRule::UsfSn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SubsetArg {
    All,
    BothCorrect,
    ACorrectBWrong,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::All => Subset::All,
            SubsetArg::BothCorrect => Subset::BothCorrect,
            SubsetArg::ACorrectBWrong => Subset::ACorrectBWrong,
        }
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Directory with the CIFAR-10 binary files (falls back to $CREDASSIGN_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Seed of the train/validation split.
    #[arg(long, default_value_t = DEFAULT_SPLIT_SEED)]
    pub split_seed: u64,
}

#[derive(Args, Debug)]
pub struct OutArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub lr: f64,
    /// Feedback scale; ignored by bp and usf_sn.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Train on a seeded subset of this many samples.
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Steps between metric rows with alignment probes; 0 disables them.
    #[arg(long, default_value_t = 100)]
    pub probe_every: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Override the learning rates of the standard grid.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    /// Override the weight decays of the standard grid.
    #[arg(long, value_delimiter = ',')]
    pub weight_decays: Option<Vec<f64>>,
    /// Override the feedback scales of the standard grid.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Probes run in parallel on this many threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct AngleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Rule to compare against exact backpropagation; defaults to the checkpoint's rule.
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct SignArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct CkaArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub subset: SubsetArg,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 250)]
    pub batch_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ChannelsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Class name or index.
    #[arg(long = "class")]
    pub class: String,
    #[arg(long)]
    pub layer: String,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ExemplarsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: String,
    /// One or more channels, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub channel: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::Io { path: path.to_path_buf(), source: e }.into()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare_out(out: &Path) -> CliResult<PathBuf> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    Ok(out.to_path_buf())
}

fn write_manifest(out: &Path, command: &str, argv: &[String], resolved: Value) -> CliResult {
    let manifest = json!({
        "command": command,
        "argv": argv,
        "resolved": resolved,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join("manifest.json"), text + "\n")
}

fn data_dir(args: &DataArgs) -> CliResult<PathBuf> {
    args.data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::config(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
}

fn load(args: &DataArgs) -> CliResult<(PathBuf, Splits)> {
    let dir = data_dir(args)?;
    let splits = load_cifar10_with_seed(&dir, args.split_seed)?;
    Ok((dir, splits))
}

fn pick(splits: &Splits, split: SplitArg) -> &Dataset {
    match split {
        SplitArg::Val => &splits.val,
        SplitArg::Test => &splits.test,
    }
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    }
}

fn opt_json(v: Option<f64>) -> Value {
    v.map_or(Value::Null, Value::from)
}

pub fn run(cli: Cli, argv: &[String]) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(a, argv),
        Command::Grid(a) => cmd_grid(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Angle(a) => cmd_angle(a, argv),
        Command::Sign(a) => cmd_sign(a, argv),
        Command::Cka(a) => cmd_cka(a, argv),
        Command::Channels(a) => cmd_channels(a, argv),
        Command::Exemplars(a) => cmd_exemplars(a, argv),
        Command::BenchBackward(a) => cmd_bench(a, argv),
    }
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let dir = data_dir(&a.data)?;
    let config = TrainConfig {
        rule: a.method.into(),
        lr: a.lr,
        sigma: a.sigma,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        train_subset: a.train_subset,
        probe_every: a.probe_every,
        data_dir: Some(dir),
        out_dir: Some(out.clone()),
    }
    .normalized()?;
    write_manifest(&out, "train", argv, json!({ "config": config, "split_seed": a.data.split_seed }))?;
    let (_, splits) = load(&a.data)?;
    match train(&config, &splits) {
        Ok(outcome) => {
            outcome.best.save(&out.join("best.ckpt"))?;
            outcome.last.save(&out.join("last.ckpt"))?;
            write(&out.join("metrics.csv"), outcome.metrics.to_csv())
        }
        Err(Error::Diverged { step, last_good }) => {
            last_good.save(&out.join("last_good.ckpt"))?;
            Err(Error::Diverged { step, last_good }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_grid(a: GridArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let rule: FeedbackRule = a.method.into();
    let mut grid = Grid::standard(rule);
    if let Some(lrs) = a.lrs {
        grid.lrs = lrs;
    }
    if let Some(wds) = a.weight_decays {
        grid.weight_decays = wds;
    }
    if let Some(s) = a.sigmas {
        if !rule.uses_sigma() {
            return Err(CliError::config(format!("{rule} has no sigma to search")));
        }
        grid.sigmas = s.into_iter().map(Some).collect();
    }
    let base = TrainConfig {
        epochs: a.probe_epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        train_subset: a.train_subset,
        probe_every: 0,
        data_dir: Some(data_dir(&a.data)?),
        out_dir: Some(out.clone()),
        ..TrainConfig::new(rule, 1e-3)
    };
    write_manifest(
        &out,
        "grid",
        argv,
        json!({ "base": base, "grid": grid, "probe_epochs": a.probe_epochs, "jobs": a.jobs, "split_seed": a.data.split_seed }),
    )?;
    let (_, splits) = load(&a.data)?;
    let report = grid_search(&base, &grid, &splits, a.probe_epochs, a.jobs)?;
    write(&out.join("grid_results.csv"), report.to_csv())?;
    let best = serde_json::to_string_pretty(report.best()).expect("config serializes");
    write(&out.join("best_config.json"), best + "\n")
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let ck = Checkpoint::load(&a.model)?;
    write_manifest(&out, "eval", argv, json!({ "model": a.model, "split": split_name(a.split), "split_seed": a.data.split_seed }))?;
    let (_, splits) = load(&a.data)?;
    let ds = pick(&splits, a.split);
    let e = evaluate(&ck.network, ds, a.batch_size)?;
    let summary = json!({ "split": split_name(a.split), "samples": ds.len(), "accuracy": e.accuracy });
    write(&out.join("eval.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    let mut csv = String::from("index,origin,label,prediction,correct\n");
    for i in 0..ds.len() {
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            ds.origin(i),
            ds.label(i),
            e.predictions[i],
            u8::from(e.correct[i])
        ));
    }
    write(&out.join("predictions.csv"), csv)?;
    let mut c = Container::new("logits", json!({ "split": split_name(a.split), "correct": e.correct }));
    c.push("logits", e.logits);
    Ok(c.save(&out.join("logits.bin"))?)
}

fn cmd_angle(a: AngleArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let ck = Checkpoint::load(&a.model)?;
    let rule = a.method.map(FeedbackRule::from).unwrap_or(ck.network.rule());
    write_manifest(&out, "angle", argv, json!({ "model": a.model, "rule": rule, "probe_batch": PROBE_BATCH, "split_seed": a.data.split_seed }))?;
    let (_, splits) = load(&a.data)?;
    let n = splits.val.len().min(PROBE_BATCH);
    if n == 0 {
        return Err(Error::EmptySubset("validation split is empty".into()).into());
    }
    let idx: Vec<usize> = (0..n).collect();
    let x: Tensor<f32> = splits.val.eval_batch(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| splits.val.label(i)).collect();
    let mut net = ck.network.clone();
    let report = gradient_angle(&mut net, &x, &labels, rule)?;
    let mut csv = String::from("layer,angle_degrees\n");
    for l in &report.layers {
        csv.push_str(&format!("{},{}\n", l.layer, l.value.map(|v| format!("{v:.6}")).unwrap_or_default()));
    }
    write(&out.join("angle.csv"), csv)
}

fn cmd_sign(a: SignArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let ck = Checkpoint::load(&a.model)?;
    write_manifest(&out, "sign", argv, json!({ "model": a.model }))?;
    let mut csv = String::from("layer,concordance\n");
    for l in concordance_report(&ck.network) {
        csv.push_str(&format!("{},{}\n", l.layer, l.value.map(|v| format!("{v:.6}")).unwrap_or_default()));
    }
    write(&out.join("concordance.csv"), csv)
}

fn cmd_cka(a: CkaArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let subset: Subset = a.subset.into();
    let ck_a = Checkpoint::load(&a.model_a)?;
    let ck_b = Checkpoint::load(&a.model_b)?;
    write_manifest(
        &out,
        "cka",
        argv,
        json!({ "model_a": a.model_a, "model_b": a.model_b, "subset": subset, "split": split_name(a.split), "split_seed": a.data.split_seed }),
    )?;
    let (_, splits) = load(&a.data)?;
    let ds = pick(&splits, a.split);
    let (pa, pb) = (out.join("model_a.dump"), out.join("model_b.dump"));
    write_activation_dump(&ck_a.network, ds, &a.model_a.display().to_string(), &pa, a.batch_size)?;
    write_activation_dump(&ck_b.network, ds, &a.model_b.display().to_string(), &pb, a.batch_size)?;
    let mut da = ActivationDump::open(&pa)?;
    let mut db = ActivationDump::open(&pb)?;
    let m = cka_grid(&mut da, &mut db, subset)?;
    write(&out.join(format!("cka_{}.csv", subset.name())), m.to_csv())
}

fn cmd_channels(a: ChannelsArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let class = class_id(&a.class)?;
    let ck = Checkpoint::load(&a.model)?;
    write_manifest(
        &out,
        "channels",
        argv,
        json!({ "model": a.model, "class_id": class, "layer": a.layer, "top_k": a.top_k, "split": split_name(a.split), "split_seed": a.data.split_seed }),
    )?;
    let (_, splits) = load(&a.data)?;
    let imp = channel_importance(&ck.network, pick(&splits, a.split), class, &a.layer, a.batch_size)?;
    let stem = format!("importance_{}_{}", CLASS_NAMES[class], a.layer);
    write(&out.join(format!("{stem}.csv")), imp.to_csv())?;
    let top = json!({ "class": CLASS_NAMES[class], "layer": a.layer, "images": imp.images, "top": imp.top(a.top_k) });
    write(&out.join(format!("{stem}.json")), serde_json::to_string_pretty(&top).expect("json") + "\n")
}

fn cmd_exemplars(a: ExemplarsArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    let ck = Checkpoint::load(&a.model)?;
    write_manifest(
        &out,
        "exemplars",
        argv,
        json!({ "model": a.model, "layer": a.layer, "channels": a.channel, "k": a.k, "split": split_name(a.split), "split_seed": a.data.split_seed }),
    )?;
    let (_, splits) = load(&a.data)?;
    let ds = pick(&splits, a.split);
    for &channel in &a.channel {
        let top = top_exemplars(&ck.network, ds, &a.layer, channel, a.k, a.batch_size)?;
        let stem = out.join(format!("exemplars_{}_{channel}", a.layer));
        let indices: Vec<usize> = top.iter().map(|e| e.index).collect();
        write_montage(ds, &indices, &stem.with_extension("ppm"))?;
        let entries: Vec<Value> = top
            .iter()
            .enumerate()
            .map(|(tile, e)| {
                json!({
                    "tile": tile,
                    "index": e.index,
                    "origin": ds.origin(e.index),
                    "label": CLASS_NAMES[ds.label(e.index)],
                    "mean_activation": e.mean_activation,
                })
            })
            .collect();
        let index = json!({ "layer": a.layer, "channel": channel, "split": split_name(a.split), "exemplars": entries });
        write(&stem.with_extension("json"), serde_json::to_string_pretty(&index).expect("json") + "\n")?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, argv: &[String]) -> CliResult {
    let out = prepare_out(&a.out.out)?;
    write_manifest(&out, "bench-backward", argv, json!({ "batch_size": a.batch_size, "reps": a.reps, "seed": a.seed }))?;
    let timings = time_all(a.batch_size, a.reps, a.seed)?;
    let bp = timings.iter().find(|t| t.rule == FeedbackRule::Bp).map(|t| t.median);
    let mut csv = String::from("method,batch_size,reps,median_seconds,ratio_to_bp\n");
    for t in &timings {
        let ratio = bp.map(|b| t.median / b);
        csv.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            t.rule,
            t.batch_size,
            t.samples.len(),
            t.median,
            opt_json(ratio)
        ));
    }
    write(&out.join("bench_backward.csv"), csv)
}
