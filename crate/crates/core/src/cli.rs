//! Command-line front end.
//!
//! Subcommands: `gen-data`, `train`, `probe`, `compare`. Every run writes into
//! its own directory and finishes with `run_manifest.json`, so a directory
//! without a manifest belongs to an interrupted run.
//!
//! Every flag may also come from a JSON file given with `--config`, keyed by
//! the flag name without dashes (`{"train-n": 1000, "eta": 0.2}`); flags on
//! the command line win. Exit codes: 0 success, 1 I/O failure, 2 invalid
//! usage or input, 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crm::{
    co_train, standard_train, trained_model, CombineRule, Curriculum, EpochRecord, ReviewMode, TrainConfig,
};
use crate::dynamics::{categorize, export_scatter, probe, Category, Thresholds};
use crate::error::{Error, Result};
use crate::eval::{evaluate, filter_metrics, loss_histogram, reward_scatter, write_loss_csv, write_reward_csv, EvalReport};
use crate::objectives::{ObjectiveConfig, ObjectiveSpec, DEFAULT_BETA, DEFAULT_EPSILON, DEFAULT_ROPO_A};
use crate::prefdata::{
    generate_synthetic, inject_noise, load_jsonl, manifest_path, save_jsonl, Dataset, GoldSpec, Split, SplitCounts,
};
use crate::rewardnet::{Checkpoint, ModelKind, ModelSpec, OptimizerKind};

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "CRMLAB_OUT";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const DATA_FILE: &str = "pairs.jsonl";
pub const SELECTIONS_CSV_HEADER: &str = "epoch,batch,model,ids";
pub const COMPARE_CSV_HEADER: &str =
    "data,eta,method,lambda,n_ok,n_failed,id_acc_mean,id_acc_std,ood_acc_mean,ood_acc_std,precision_mean,precision_std";

const DEFAULT_INIT_SCALE: f64 = 0.1;
const DEFAULT_LAMBDA_UNKNOWN_ETA: f64 = 0.8;

#[derive(Debug, Parser)]
#[command(name = "crmlab", version, about = "Collaborative reward modeling on synthetic noisy preferences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic preference dataset and flip a fraction of its train labels.
    GenData(GenDataArgs),
    /// Train a standard reward model or a CRM pair, then evaluate it.
    Train(TrainArgs),
    /// Record per-pair training dynamics of a standard model and categorize pairs.
    Probe(ProbeArgs),
    /// Run a grid of train runs and aggregate their reports.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenDataArgs {
    /// JSON file with values for any of the other flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Feature dimension [default: 16]
    #[arg(long)]
    pub d: Option<usize>,
    /// Train pairs [default: 2000]
    #[arg(long)]
    pub train_n: Option<usize>,
    /// Pairs in each of id_test and ood_test [default: 500]
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Mean shift of every coordinate in ood_test [default: 1.0]
    #[arg(long, allow_hyphen_values = true)]
    pub ood_shift: Option<f64>,
    /// Gold labeling temperature; 0 labels by the larger gold reward [default: 0]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Fraction of train pairs to flip, in [0, 0.5) [default: 0]
    #[arg(long)]
    pub eta: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $CRMLAB_OUT/gen-data, else runs/gen-data]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Training flags shared by `train` and `compare`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainOpts {
    /// bt | cdpo | rdpo | ropo | dpo [default: bt]
    #[arg(long)]
    pub objective: Option<String>,
    /// Flip rate assumed by cdpo / rdpo [default: 0.2]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// ROPO trade-off [default: 1]
    #[arg(long)]
    pub a: Option<f64>,
    /// DPO temperature [default: 0.1]
    #[arg(long)]
    pub beta: Option<f64>,
    /// peer | self | none [default: peer for crm, none for standard]
    #[arg(long)]
    pub review: Option<String>,
    /// on | off | batches [default: on for crm, off for standard]
    #[arg(long)]
    pub curriculum: Option<String>,
    /// Curriculum key: mean | min | model_phi [default: mean]
    #[arg(long)]
    pub combine: Option<String>,
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.01 for linear, 0.001 for mlp]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    pub batch: Option<usize>,
    /// linear | mlp:H [default: linear]
    #[arg(long)]
    pub model: Option<String>,
    /// Second model of a crm pair [default: --model]
    #[arg(long)]
    pub model2: Option<String>,
    /// adam | sgd [default: adam]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Standard deviation of the initial weights [default: 0.1]
    #[arg(long)]
    pub init_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// JSON file with values for any of the other flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory (containing pairs.jsonl) or JSONL file
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// standard | crm [default: crm]
    #[arg(long)]
    pub method: Option<String>,
    /// Selection ratio [default: 1 - eta from the dataset manifest, 0.8 without one]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Shuffle seed; model inits use seed and seed + 1 [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $CRMLAB_OUT/train, else runs/train]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ProbeArgs {
    /// JSON file with values for any of the other flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory (containing pairs.jsonl) or JSONL file
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// At least 2 [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ambiguous above this σ quantile [default: 0.75]
    #[arg(long)]
    pub q_sigma: Option<f64>,
    /// NonRobust above this μ quantile [default: 0.75]
    #[arg(long)]
    pub q_mu: Option<f64>,
    /// [default: 0.01 for linear, 0.001 for mlp]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    pub batch: Option<usize>,
    /// linear | mlp:H [default: linear]
    #[arg(long)]
    pub model: Option<String>,
    /// adam | sgd [default: adam]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// [default: 0.1]
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $CRMLAB_OUT/probe, else runs/probe]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CompareArgs {
    /// JSON file with values for any of the other flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Comma-separated dataset directories or JSONL files
    #[arg(long, value_delimiter = ',')]
    pub data: Option<Vec<PathBuf>>,
    /// Comma-separated: standard, crm, crm-self, crm-none [default: standard,crm]
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// [default: 1,2,3,4,5]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Selection ratios for crm and crm-self [default: 1 - eta per dataset]
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Output directory [default: $CRMLAB_OUT/compare, else runs/compare]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
}

/// Written last into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the run directory, in write order.
    pub artifacts: Vec<String>,
    pub duration_secs: f64,
    pub version: String,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Io { .. } => 1,
        Error::Numeric(_) => 3,
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Schema { .. } | Error::Json(_) => 2,
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => {
            let file = args.config.clone();
            cmd_gen_data(merge_config(args, file.as_deref())?)
        }
        Command::Train(args) => {
            let file = args.config.clone();
            cmd_train(merge_config(args, file.as_deref())?).map(|_| ())
        }
        Command::Probe(args) => {
            let file = args.config.clone();
            cmd_probe(merge_config(args, file.as_deref())?)
        }
        Command::Compare(args) => {
            let file = args.config.clone();
            cmd_compare(merge_config(args, file.as_deref())?).map(|_| ())
        }
    }
}

/// Fill flags left unset from the JSON object in `file`.
pub fn merge_config<T: Serialize + DeserializeOwned>(args: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let from_file: Value = serde_json::from_str(&text)?;
    let Value::Object(from_file) = from_file else {
        return Err(Error::invalid(format!("config file {} must hold a JSON object", path.display())));
    };
    let Value::Object(mut merged) = serde_json::to_value(&args)? else {
        unreachable!("argument structs serialize to objects");
    };
    for (key, value) in from_file {
        match merged.get_mut(&key) {
            None => return Err(Error::invalid(format!("unknown config key {key:?}"))),
            Some(slot) if slot.is_null() => *slot = value,
            Some(_) => {}
        }
    }
    Ok(serde_json::from_value(Value::Object(merged))?)
}

fn default_out(command: &str) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

/// Directory of one run; remembers every file written into it.
struct RunDir {
    root: PathBuf,
    written: Vec<String>,
    started: Instant,
}

impl RunDir {
    fn create(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir {
            root,
            written: Vec::new(),
            started: Instant::now(),
        })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.file(name);
        write_json(&path, value)
    }

    fn finish(mut self, command: &str, config: Value, seeds: BTreeMap<String, u64>) -> Result<Vec<String>> {
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seeds,
            artifacts: self.written.clone(),
            duration_secs: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        self.json(RUN_MANIFEST, &manifest)?;
        Ok(self.written)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- gen-data

pub fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let d = args.d.unwrap_or(16);
    let train_n = args.train_n.unwrap_or(2000);
    let test_n = args.test_n.unwrap_or(500);
    let shift = args.ood_shift.unwrap_or(1.0);
    let temperature = args.temperature.unwrap_or(0.0);
    let eta = args.eta.unwrap_or(0.0);
    let seed = args.seed.unwrap_or(0);
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::invalid(format!("--eta {eta} must lie in [0, 0.5)")));
    }
    if !shift.is_finite() {
        return Err(Error::invalid("--ood-shift must be finite"));
    }
    let gold = GoldSpec::random_unit(d, seed, temperature)?;
    let counts = SplitCounts {
        train: train_n,
        id_test: test_n,
        ood_test: test_n,
    };
    let clean = generate_synthetic(d, counts, &gold, Some(&vec![shift; d]), seed)?;
    let noisy = inject_noise(&clean, eta, seed)?;

    let mut dir = RunDir::create(args.out.clone().unwrap_or_else(|| default_out("gen-data")))?;
    let data_path = dir.file(DATA_FILE);
    let manifest_name = manifest_path(Path::new(DATA_FILE)).display().to_string();
    dir.written.push(manifest_name);
    save_jsonl(&noisy, &data_path)?;
    dir.json("gold.json", &gold)?;

    let config = serde_json::json!({
        "d": d,
        "train_n": train_n,
        "test_n": test_n,
        "ood_shift": shift,
        "temperature": temperature,
        "eta": eta,
        "seed": seed,
        "flipped": noisy.flipped_count(Split::Train),
    });
    dir.finish("gen-data", config, BTreeMap::from([("data".to_string(), seed)]))?;
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    Crm,
}

/// Dataset plus the flip rate its manifest declares, if it has one.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub path: PathBuf,
    pub dataset: Dataset,
    pub eta: Option<f64>,
}

pub fn load_data(path: &Path) -> Result<LoadedData> {
    let file = if path.is_dir() { path.join(DATA_FILE) } else { path.to_path_buf() };
    let dataset = load_jsonl(&file)?;
    let eta = manifest_path(&file).exists().then_some(dataset.manifest.eta);
    Ok(LoadedData {
        path: file,
        dataset,
        eta,
    })
}

/// Fully resolved settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub method: Method,
    pub data: PathBuf,
    pub eta: Option<f64>,
    pub objective: ObjectiveConfig,
    pub config: TrainConfig,
    pub model_phi: ModelSpec,
    pub model_psi: Option<ModelSpec>,
}

fn parse_opt<T: std::str::FromStr<Err = Error>>(value: &Option<String>, default: T) -> Result<T> {
    value.as_deref().map_or(Ok(default), str::parse)
}

fn default_lr(kind: ModelKind) -> f64 {
    match kind {
        ModelKind::Linear => 1e-2,
        ModelKind::Mlp { .. } => 1e-3,
    }
}

fn objective_of(opts: &TrainOpts) -> Result<ObjectiveSpec> {
    ObjectiveSpec::try_from(ObjectiveConfig {
        objective: opts.objective.clone().unwrap_or_else(|| "bt".to_string()),
        epsilon: opts.epsilon.unwrap_or(DEFAULT_EPSILON),
        a: opts.a.unwrap_or(DEFAULT_ROPO_A),
        beta: opts.beta.unwrap_or(DEFAULT_BETA),
    })
}

/// Resolve flags into a run plan. `review` overrides `opts.review`.
pub fn plan_train(
    opts: &TrainOpts,
    method: Method,
    review: Option<ReviewMode>,
    lambda: Option<f64>,
    seed: u64,
    data: &LoadedData,
) -> Result<TrainPlan> {
    let objective = objective_of(opts)?;
    let kind: ModelKind = parse_opt(&opts.model, ModelKind::Linear)?;
    let kind2: ModelKind = match &opts.model2 {
        Some(s) => s.parse()?,
        None => kind,
    };
    let init_scale = opts.init_scale.unwrap_or(DEFAULT_INIT_SCALE);
    let d = data.dataset.dim();
    let model_phi = ModelSpec {
        kind,
        input_dim: d,
        init_scale,
        init_seed: seed,
    };
    model_phi.validate()?;

    let review = match review {
        Some(r) => r,
        None => parse_opt(
            &opts.review,
            match method {
                Method::Standard => ReviewMode::None,
                Method::Crm => ReviewMode::Peer,
            },
        )?,
    };
    let curriculum: Curriculum = parse_opt(
        &opts.curriculum,
        match method {
            Method::Standard => Curriculum::Off,
            Method::Crm => Curriculum::On,
        },
    )?;
    let lambda = match (method, review) {
        (Method::Standard, _) | (_, ReviewMode::None) => {
            if let Some(l) = lambda.filter(|l| *l != 1.0) {
                return Err(Error::invalid(format!(
                    "--lambda {l} contradicts {}: every pair is used, so lambda must be 1",
                    if method == Method::Standard { "--method standard" } else { "--review none" }
                )));
            }
            1.0
        }
        _ => lambda.unwrap_or_else(|| data.eta.map_or(DEFAULT_LAMBDA_UNKNOWN_ETA, |eta| 1.0 - eta)),
    };
    if method == Method::Standard {
        if review != ReviewMode::None {
            return Err(Error::invalid("--method standard takes no --review other than none"));
        }
        if curriculum != Curriculum::Off {
            return Err(Error::invalid("--method standard takes no curriculum"));
        }
        if opts.model2.is_some() {
            return Err(Error::invalid("--model2 needs --method crm"));
        }
    }

    let config = TrainConfig {
        epochs: opts.epochs.unwrap_or(10),
        batch_size: opts.batch.unwrap_or(64),
        learning_rate: opts.lr.unwrap_or_else(|| default_lr(kind)),
        optimizer: parse_opt(&opts.optimizer, OptimizerKind::Adam)?,
        lambda,
        review,
        curriculum,
        combine: parse_opt(&opts.combine, CombineRule::Mean)?,
        objective,
        seed,
    };
    config.validate()?;
    let model_psi = (method == Method::Crm)
        .then(|| ModelSpec {
            kind: kind2,
            init_seed: seed.wrapping_add(1),
            ..model_phi
        })
        .map(|s| s.validate().map(|_| s))
        .transpose()?;
    Ok(TrainPlan {
        method,
        data: data.path.clone(),
        eta: data.eta,
        objective: objective.into(),
        config,
        model_phi,
        model_psi,
    })
}

/// Report of a finished train run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub report: EvalReport,
    pub artifacts: Vec<String>,
}

pub fn cmd_train(args: TrainArgs) -> Result<TrainOutcome> {
    let data_path = args.data.clone().ok_or_else(|| Error::invalid("--data is required"))?;
    let data = load_data(&data_path)?;
    let method = match args.method.as_deref().unwrap_or("crm") {
        "standard" => Method::Standard,
        "crm" => Method::Crm,
        other => return Err(Error::invalid(format!("unknown method {other:?} (standard | crm)"))),
    };
    let plan = plan_train(&args.opts, method, None, args.lambda, args.seed.unwrap_or(0), &data)?;
    let out = args.out.clone().unwrap_or_else(|| default_out("train"));
    execute_plan(&plan, &data.dataset, out)
}

/// Train, evaluate and write all artifacts of one plan into `out`.
pub fn execute_plan(plan: &TrainPlan, dataset: &Dataset, out: PathBuf) -> Result<TrainOutcome> {
    let objective = ObjectiveSpec::try_from(plan.objective.clone())?;
    let (checkpoints, history) = match plan.method {
        Method::Standard => {
            let r = standard_train(dataset, &plan.model_phi, &plan.config)?;
            (vec![("model.json", r.model)], r.history)
        }
        Method::Crm => {
            let psi = plan.model_psi.as_ref().ok_or_else(|| Error::invalid("crm plan lacks a second model"))?;
            let r = co_train(dataset, &plan.model_phi, psi, &plan.config)?;
            (vec![("phi.json", r.phi), ("psi.json", r.psi)], r.history)
        }
    };
    let model = trained_model(&checkpoints[0].1, &objective)?;
    let filter = match plan.method {
        Method::Crm if plan.config.lambda < 1.0 => Some(filter_metrics(&history, dataset, None, 0)?),
        _ => None,
    };
    let report = evaluate(&model, dataset, &objective, filter.as_ref())?;

    let mut dir = RunDir::create(out)?;
    for (name, checkpoint) in &checkpoints {
        save_checkpoint(&mut dir, name, checkpoint)?;
    }
    dir.json("history.json", &history)?;
    let path = dir.file("selections.csv");
    write_text(&path, &selections_csv(&history))?;
    dir.json("report.json", &report)?;
    let path = dir.file("loss_hist.csv");
    write_loss_csv(&loss_histogram(&model, dataset, &objective)?, &path)?;
    let path = dir.file("reward_scatter.csv");
    write_reward_csv(&reward_scatter(&model, &dataset.split_vec(Split::Train))?, &path)?;

    let mut seeds = BTreeMap::from([
        ("shuffle".to_string(), plan.config.seed),
        ("init_phi".to_string(), plan.model_phi.init_seed),
        ("data".to_string(), dataset.manifest.seed),
    ]);
    if let Some(psi) = &plan.model_psi {
        seeds.insert("init_psi".to_string(), psi.init_seed);
    }
    let artifacts = dir.finish("train", serde_json::to_value(plan)?, seeds)?;
    Ok(TrainOutcome { report, artifacts })
}

fn save_checkpoint(dir: &mut RunDir, name: &str, checkpoint: &Checkpoint) -> Result<()> {
    let path = dir.file(name);
    checkpoint.save(&path)
}

/// `epoch,batch,model,ids` with the ids space-separated.
pub fn selections_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(SELECTIONS_CSV_HEADER);
    out.push('\n');
    for record in history {
        for batch in &record.selections {
            for (model, ids) in batch.received.iter().enumerate() {
                let ids: Vec<String> = ids.iter().map(u64::to_string).collect();
                let _ = writeln!(out, "{},{},{},{}", record.epoch, batch.batch, model, ids.join(" "));
            }
        }
    }
    out
}

// ---------------------------------------------------------------- probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub thresholds: Thresholds,
    pub sigma_cut: f64,
    pub mu_cut: f64,
    pub mu_median: f64,
    pub sigma_median: f64,
    pub degenerate: bool,
    pub counts: BTreeMap<String, usize>,
    pub flipped: BTreeMap<String, usize>,
}

pub fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let data_path = args.data.clone().ok_or_else(|| Error::invalid("--data is required"))?;
    let epochs = args.epochs.unwrap_or(10);
    if epochs < 2 {
        return Err(Error::invalid(format!("--epochs {epochs}: the loss spread needs at least 2 epochs")));
    }
    let thresholds = Thresholds {
        q_sigma: args.q_sigma.unwrap_or(0.75),
        q_mu: args.q_mu.unwrap_or(0.75),
        ..Thresholds::default()
    };
    thresholds.validate()?;
    let data = load_data(&data_path)?;
    let kind: ModelKind = parse_opt(&args.model, ModelKind::Linear)?;
    let seed = args.seed.unwrap_or(0);
    let spec = ModelSpec {
        kind,
        input_dim: data.dataset.dim(),
        init_scale: args.init_scale.unwrap_or(DEFAULT_INIT_SCALE),
        init_seed: seed,
    };
    spec.validate()?;
    let config = TrainConfig {
        epochs,
        batch_size: args.batch.unwrap_or(64),
        learning_rate: args.lr.unwrap_or_else(|| default_lr(kind)),
        optimizer: parse_opt(&args.optimizer, OptimizerKind::Adam)?,
        seed,
        ..TrainConfig::default()
    };
    let stats = probe(&data.dataset, &spec, &config)?;
    let cats = categorize(&stats, &thresholds)?;

    let all = [Category::Robust, Category::NonRobust, Category::Ambiguous, Category::Unassigned];
    let flipped: BTreeMap<u64, bool> = data.dataset.split(Split::Train).map(|p| (p.id, p.flipped)).collect();
    let summary = CategorySummary {
        thresholds,
        sigma_cut: cats.sigma_cut,
        mu_cut: cats.mu_cut,
        mu_median: cats.mu_median,
        sigma_median: cats.sigma_median,
        degenerate: cats.degenerate,
        counts: all.iter().map(|c| (c.as_str().to_string(), cats.count(*c))).collect(),
        flipped: all
            .iter()
            .map(|c| {
                let n = cats.labels.iter().filter(|(id, l)| *l == c && flipped[*id]).count();
                (c.as_str().to_string(), n)
            })
            .collect(),
    };
    if cats.degenerate {
        eprintln!("warning: all pairs share the same statistics; categories are degenerate");
    }

    let mut dir = RunDir::create(args.out.clone().unwrap_or_else(|| default_out("probe")))?;
    let path = dir.file("dynamics.csv");
    export_scatter(&stats, &cats, &data.dataset, &path)?;
    dir.json("categories.json", &summary)?;
    let run_config = serde_json::json!({
        "data": data.path,
        "model": spec,
        "train": config,
        "thresholds": thresholds,
    });
    dir.finish(
        "probe",
        run_config,
        BTreeMap::from([("shuffle".to_string(), seed), ("init".to_string(), seed)]),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- compare

/// One (dataset, method, λ, seed) run of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub data: String,
    pub eta: Option<f64>,
    pub method: String,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub dir: String,
    pub id_accuracy: Option<f64>,
    pub ood_accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub exit_code: i32,
}

/// Aggregate of the cells sharing (dataset, method, λ). Stds are population stds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub data: String,
    pub eta: Option<f64>,
    pub method: String,
    pub lambda: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub id_acc_mean: Option<f64>,
    pub id_acc_std: Option<f64>,
    pub ood_acc_mean: Option<f64>,
    pub ood_acc_std: Option<f64>,
    pub precision_mean: Option<f64>,
    pub precision_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub cells: Vec<CellResult>,
}

fn method_variant(name: &str) -> Result<(Method, Option<ReviewMode>)> {
    match name {
        "standard" => Ok((Method::Standard, None)),
        "crm" => Ok((Method::Crm, None)),
        "crm-self" => Ok((Method::Crm, Some(ReviewMode::SelfReview))),
        "crm-none" => Ok((Method::Crm, Some(ReviewMode::None))),
        other => Err(Error::invalid(format!(
            "unknown method {other:?} (standard | crm | crm-self | crm-none)"
        ))),
    }
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn lambda_label(lambda: Option<f64>) -> String {
    lambda.map_or_else(|| "lambda-default".to_string(), |l| format!("lambda-{l}"))
}

pub fn cmd_compare(args: CompareArgs) -> Result<CompareOutcome> {
    let data_paths = args.data.clone().filter(|d| !d.is_empty()).ok_or_else(|| Error::invalid("--data is required"))?;
    let methods = args
        .methods
        .clone()
        .unwrap_or_else(|| vec!["standard".to_string(), "crm".to_string()]);
    let seeds = args.seeds.clone().unwrap_or_else(|| (1..=5).collect());
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("--methods and --seeds must not be empty"));
    }
    let variants = methods
        .iter()
        .map(|m| method_variant(m).map(|v| (m.clone(), v)))
        .collect::<Result<Vec<_>>>()?;
    let data = data_paths.iter().map(|p| load_data(p)).collect::<Result<Vec<_>>>()?;
    let out = args.out.clone().unwrap_or_else(|| default_out("compare"));

    struct Cell<'a> {
        data: &'a LoadedData,
        label: String,
        method: String,
        variant: (Method, Option<ReviewMode>),
        lambda: Option<f64>,
        seed: u64,
        dir: String,
    }
    let mut cells = Vec::new();
    for (i, d) in data.iter().enumerate() {
        let label = format!("d{i}");
        for (name, variant) in &variants {
            let selective = variant.0 == Method::Crm && variant.1 != Some(ReviewMode::None);
            let lambdas: Vec<Option<f64>> = match &args.lambdas {
                Some(ls) if selective => ls.iter().copied().map(Some).collect(),
                _ => vec![None],
            };
            for lambda in lambdas {
                for &seed in &seeds {
                    let dir = format!("cells/{label}/{name}/{}/seed-{seed}", lambda_label(lambda));
                    cells.push(Cell {
                        data: d,
                        label: label.clone(),
                        method: name.clone(),
                        variant: *variant,
                        lambda,
                        seed,
                        dir,
                    });
                }
            }
        }
    }

    let started = Instant::now();
    let results: Vec<(CellResult, Vec<String>)> = cells
        .par_iter()
        .map(|cell| {
            let outcome = plan_train(&args.opts, cell.variant.0, cell.variant.1, cell.lambda, cell.seed, cell.data)
                .and_then(|plan| {
                    let lambda = plan.config.lambda;
                    execute_plan(&plan, &cell.data.dataset, out.join(&cell.dir)).map(|o| (lambda, o))
                });
            let mut result = CellResult {
                data: cell.label.clone(),
                eta: cell.data.eta,
                method: cell.method.clone(),
                lambda: cell.lambda,
                seed: cell.seed,
                dir: cell.dir.clone(),
                id_accuracy: None,
                ood_accuracy: None,
                precision: None,
                error: None,
                exit_code: 0,
            };
            match outcome {
                Ok((lambda, o)) => {
                    result.lambda = Some(lambda);
                    result.id_accuracy = Some(o.report.id_accuracy);
                    result.ood_accuracy = Some(o.report.ood_accuracy);
                    result.precision = o.report.filter.precision;
                    let files = o.artifacts.iter().map(|a| format!("{}/{a}", cell.dir)).collect();
                    (result, files)
                }
                Err(e) => {
                    result.exit_code = exit_code(&e);
                    result.error = Some(e.to_string());
                    (result, Vec::new())
                }
            }
        })
        .collect();

    let mut groups: Vec<((String, String, String), Vec<&CellResult>)> = Vec::new();
    for (cell, (result, _)) in cells.iter().zip(&results) {
        let key = (cell.label.clone(), cell.method.clone(), lambda_label(cell.lambda));
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(result),
            None => groups.push((key, vec![result])),
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (_, group) in &groups {
        let ok: Vec<&&CellResult> = group.iter().filter(|c| c.error.is_none()).collect();
        let id: Vec<f64> = ok.iter().filter_map(|c| c.id_accuracy).collect();
        let ood: Vec<f64> = ok.iter().filter_map(|c| c.ood_accuracy).collect();
        let prec: Vec<f64> = ok.iter().filter_map(|c| c.precision).collect();
        let (id_acc_mean, id_acc_std) = mean_std(&id);
        let (ood_acc_mean, ood_acc_std) = mean_std(&ood);
        let (precision_mean, precision_std) = mean_std(&prec);
        let first = group[0];
        rows.push(CompareRow {
            data: first.data.clone(),
            eta: first.eta,
            method: first.method.clone(),
            lambda: ok.first().and_then(|c| c.lambda).or(first.lambda),
            n_ok: ok.len(),
            n_failed: group.len() - ok.len(),
            id_acc_mean,
            id_acc_std,
            ood_acc_mean,
            ood_acc_std,
            precision_mean,
            precision_std,
        });
    }

    let outcome = CompareOutcome {
        rows,
        cells: results.iter().map(|(r, _)| r.clone()).collect(),
    };
    let mut dir = RunDir::create(out)?;
    dir.started = started;
    for (_, files) in &results {
        dir.written.extend(files.iter().cloned());
    }
    let path = dir.file("compare.csv");
    write_text(&path, &compare_csv(&outcome.rows))?;
    dir.json("compare.json", &outcome)?;
    let config = serde_json::json!({
        "data": data.iter().map(|d| d.path.clone()).collect::<Vec<_>>(),
        "methods": methods,
        "seeds": seeds,
        "lambdas": args.lambdas,
        "train": args.opts,
    });
    let seed_map = seeds.iter().map(|s| (format!("seed-{s}"), *s)).collect();
    dir.finish("compare", config, seed_map)?;
    print!("{}", compare_table(&outcome.rows));

    for cell in outcome.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("cell {} failed: {}", cell.dir, cell.error.as_deref().unwrap_or(""));
    }
    if outcome.cells.iter().all(|c| c.error.is_some()) {
        let first = &outcome.cells[0];
        let message = format!("every cell failed; first: {}", first.error.as_deref().unwrap_or(""));
        return Err(match first.exit_code {
            1 => Error::io(&first.dir, std::io::Error::other(message)),
            3 => Error::numeric(message),
            _ => Error::invalid(message),
        });
    }
    Ok(outcome)
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.data,
            opt_num(r.eta),
            r.method,
            opt_num(r.lambda),
            r.n_ok,
            r.n_failed,
            opt_num(r.id_acc_mean),
            opt_num(r.id_acc_std),
            opt_num(r.ood_acc_mean),
            opt_num(r.ood_acc_std),
            opt_num(r.precision_mean),
            opt_num(r.precision_std),
        );
    }
    out
}

/// Human-readable table; accuracies in percent, 2 decimals.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let pct = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        _ => "-".to_string(),
    };
    let mut out = format!(
        "{:<5} {:>6} {:<9} {:>7} {:>16} {:>16} {:>16} {:>6}\n",
        "data", "eta", "method", "lambda", "id acc", "ood acc", "precision", "failed"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<5} {:>6} {:<9} {:>7} {:>16} {:>16} {:>16} {:>6}",
            r.data,
            r.eta.map_or_else(|| "-".to_string(), |e| format!("{e:.2}")),
            r.method,
            r.lambda.map_or_else(|| "-".to_string(), |l| format!("{l:.2}")),
            pct(r.id_acc_mean, r.id_acc_std),
            pct(r.ood_acc_mean, r.ood_acc_std),
            pct(r.precision_mean, r.precision_std),
            r.n_failed,
        );
    }
    out
}
