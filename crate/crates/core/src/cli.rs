//! `srpl` command line: dataset generation, training, evaluation, surgical
//! swap, multi-seed comparison and diagnostics.
//!
//! Exit codes: 0 success, 2 usage, 3 numeric failure, 4 state, 5 format,
//! 6 missing input.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::diagnostics::{
    depth_probe, loss_compare, resonance_audit, summarize, task_distance, write_curves_csv, zigzag_report,
};
use crate::error::{Result, SrplError};
use crate::model::checkpoint::{read_checkpoint, write_checkpoint};
use crate::model::{build_model, BasisInit, Model, ModelConfig};
use crate::rope::{BasisTrainable, RotationEngineKind};
use crate::tasks::{TaskKind, TaskParams, TaskSpec};
use crate::tensor::Tensor;
use crate::train::{eval_sample_seed, evaluate, read_snapshot_csvs, train, RunHistory, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_STATE: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;
pub const EXIT_MISSING: i32 = 6;

pub fn exit_code(e: &SrplError) -> i32 {
    match e {
        SrplError::Dimension { .. } | SrplError::Contract(_) | SrplError::Index { .. } | SrplError::Input(_) => EXIT_USAGE,
        SrplError::NonFinite { .. } | SrplError::Numeric { .. } => EXIT_NUMERIC,
        SrplError::State(_) => EXIT_STATE,
        SrplError::Format(_) => EXIT_FORMAT,
        SrplError::Missing(_) => EXIT_MISSING,
        SrplError::Io(e) if e.kind() == io::ErrorKind::NotFound => EXIT_MISSING,
        SrplError::Io(_) => 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "srpl", version, about = "Spectral rotary position encoding lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a task dataset in the tab-separated dump format.
    Gen(GenArgs),
    /// Train one model and write checkpoint, history and summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh held-out samples.
    Eval(EvalArgs),
    /// Swap a standard checkpoint onto the spectral engine.
    Swap(SwapArgs),
    /// Train both engines on each task over a list of seeds.
    Compare(TrainArgs),
    /// Emit diagnostic reports for a training run directory.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(value_parser = parse_task)]
    pub task: TaskKind,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub motif_len: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Task name, or `all` for `compare`.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_parser = parse_engine)]
    pub engine: Option<RotationEngineKind>,
    /// `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seed list (`compare`).
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub basis_lr: Option<f64>,
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub untied_phase: bool,
    /// Spectral engine with zero initial phases and no trainable basis.
    #[arg(long)]
    pub freeze_basis: bool,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub motif_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the task recorded in the checkpoint.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SwapArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Comma-separated subset of zigzag, depth, resonance.
    #[arg(long, default_value = "zigzag,depth,resonance")]
    pub report: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Task distance for the resonance audit; read from Bio samples otherwise.
    #[arg(long)]
    pub distance: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: SrplError| e.to_string())
}

fn parse_engine(s: &str) -> std::result::Result<RotationEngineKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "standard" | "std" => Ok(RotationEngineKind::Standard),
        "spectral" | "spec" => Ok(RotationEngineKind::Spectral),
        other => Err(format!("unknown engine `{other}` (expected standard, spectral)")),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(SrplError::input(format!("`{key}` expects a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| SrplError::input(format!("`{key}` has invalid value `{v}`")))
}

/// Every knob of a run. Each field has a default; config-file keys map
/// one-to-one onto fields and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub task: String,
    pub engine: RotationEngineKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task_params: TaskParams,
    pub freeze_basis: bool,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

pub const CONFIG_KEYS: &[&str] = &[
    "task",
    "engine",
    "out",
    "seed",
    "seeds",
    "steps",
    "batch_size",
    "learning_rate",
    "basis_learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "snapshot_every",
    "eval_samples",
    "hidden_dim",
    "num_heads",
    "num_layers",
    "max_seq_len",
    "rope_base",
    "untied_phase",
    "freeze_basis",
    "dyck_max_depth",
    "dyck_len",
    "motif_len",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: "dyck3".into(),
            engine: RotationEngineKind::Spectral,
            model: ModelConfig::new(0, RotationEngineKind::Spectral),
            train: TrainConfig::default(),
            task_params: TaskParams::default(),
            freeze_basis: false,
            out: PathBuf::from("runs"),
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => self.task = v.to_string(),
            "engine" => self.engine = parse_engine(v).map_err(SrplError::input)?,
            "out" => self.out = PathBuf::from(v),
            "seed" => self.train.seed = parse_num(key, v)?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "steps" => self.train.steps = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "basis_learning_rate" => self.train.basis_learning_rate = parse_num(key, v)?,
            "adam_beta1" => self.train.adam_betas.0 = parse_num(key, v)?,
            "adam_beta2" => self.train.adam_betas.1 = parse_num(key, v)?,
            "adam_eps" => self.train.adam_eps = parse_num(key, v)?,
            "snapshot_every" => self.train.snapshot_every = parse_num(key, v)?,
            "eval_samples" => self.train.eval_samples = parse_num(key, v)?,
            "hidden_dim" => self.model.hidden_dim = parse_num(key, v)?,
            "num_heads" => self.model.num_heads = parse_num(key, v)?,
            "num_layers" => self.model.num_layers = parse_num(key, v)?,
            "max_seq_len" => self.model.max_seq_len = parse_num(key, v)?,
            "rope_base" => self.model.rope_base = parse_num(key, v)?,
            "untied_phase" => self.model.untied_phase = parse_bool(key, v)?,
            "freeze_basis" => self.freeze_basis = parse_bool(key, v)?,
            "dyck_max_depth" => self.task_params.dyck_max_depth = parse_num(key, v)?,
            "dyck_len" => self.task_params.dyck_len = parse_num(key, v)?,
            "motif_len" => self.task_params.motif_len = parse_num(key, v)?,
            _ => {
                return Err(SrplError::input(format!(
                    "unknown config key `{key}` (known keys: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SrplError::input(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_args(args: &TrainArgs) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| missing_or_io(e, &format!("config file {}", path.display())))?;
            cfg.apply_file_text(&text)?;
        }
        let overrides: [(&str, Option<String>); 14] = [
            ("task", args.task.clone()),
            ("engine", args.engine.map(|e| e.as_str().to_string())),
            ("out", args.out.as_ref().map(|p| p.display().to_string())),
            ("seed", args.seed.map(|s| s.to_string())),
            ("seeds", args.seeds.clone()),
            ("steps", args.steps.map(|s| s.to_string())),
            ("batch_size", args.batch_size.map(|s| s.to_string())),
            ("learning_rate", args.lr.map(|s| s.to_string())),
            ("basis_learning_rate", args.basis_lr.map(|s| s.to_string())),
            ("snapshot_every", args.snapshot_every.map(|s| s.to_string())),
            ("eval_samples", args.eval_samples.map(|s| s.to_string())),
            ("dyck_max_depth", args.max_depth.map(|s| s.to_string())),
            ("dyck_len", args.len.map(|s| s.to_string())),
            ("motif_len", args.motif_len.map(|s| s.to_string())),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if args.untied_phase {
            cfg.model.untied_phase = true;
        }
        if args.freeze_basis {
            cfg.freeze_basis = true;
        }
        Ok(cfg)
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        if self.task.eq_ignore_ascii_case("all") {
            return TaskKind::ALL.iter().map(|&k| TaskSpec::new(k, self.task_params.clone())).collect();
        }
        Ok(vec![TaskSpec::new(self.task.parse()?, self.task_params.clone())?])
    }

    pub fn model_config(&self, task: &TaskSpec, engine: RotationEngineKind) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = task.vocab_size();
        m.engine = engine;
        if self.freeze_basis && engine == RotationEngineKind::Spectral {
            m.basis_init = BasisInit::Surgical;
            m.basis_trainable = BasisTrainable::NONE;
        }
        m
    }
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let seeds = v
        .split(',')
        .map(|s| parse_num::<u64>("seeds", s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(SrplError::input("seed list is empty"));
    }
    Ok(seeds)
}

fn missing_or_io(e: io::Error, what: &str) -> SrplError {
    if e.kind() == io::ErrorKind::NotFound {
        SrplError::Missing(format!("{what} does not exist"))
    } else {
        SrplError::Io(e)
    }
}

/// Writes through a temporary file in the destination directory, then
/// renames it into place.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| SrplError::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SrplError::format(e.to_string()))?;
    write_atomic(path, |w| writeln!(w, "{text}"))
}

/// Task metadata stored alongside model tensors in checkpoints.
pub const TASK_META: &str = "meta.task";

pub fn task_meta(task: &TaskSpec) -> (String, Tensor) {
    let p = &task.params;
    let data = vec![
        task.kind.code() as f64,
        p.dyck_max_depth as f64,
        p.dyck_len as f64,
        p.motif_len as f64,
    ];
    (TASK_META.into(), Tensor::vector(data).expect("non-empty"))
}

pub fn task_from_meta(extra: &[(String, Tensor)]) -> Result<Option<TaskSpec>> {
    let Some((_, t)) = extra.iter().find(|(n, _)| n == TASK_META) else {
        return Ok(None);
    };
    let d = t.data();
    if d.len() != 4 || d.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(SrplError::format(format!("`{TASK_META}` tensor is malformed")));
    }
    let kind = TaskKind::from_code(d[0] as usize)
        .ok_or_else(|| SrplError::format(format!("unknown task code {}", d[0])))?;
    let params = TaskParams {
        dyck_max_depth: d[1] as usize,
        dyck_len: d[2] as usize,
        motif_len: d[3] as usize,
    };
    Ok(Some(TaskSpec::new(kind, params).map_err(|e| SrplError::format(e.to_string()))?))
}

/// Largest absolute logit difference between two models over `probes`.
pub fn max_logit_delta(a: &Model, b: &Model, probes: &[Vec<usize>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in probes {
        let (la, lb) = (a.forward(p)?, b.forward(p)?);
        worst = worst.max(la.max_abs_diff(&lb)?);
    }
    Ok(worst)
}

/// `n` fixed probe sequences: task samples when the task is known, otherwise
/// deterministic pseudo-random token strings.
pub fn probe_batch(model: &Model, task: Option<&TaskSpec>, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let cfg = model.config();
    (0..n as u64)
        .map(|i| match task {
            Some(t) => Ok(t.sample(eval_sample_seed(seed, i))?.input_tokens),
            None => {
                let len = cfg.max_seq_len.min(64);
                let mut x = eval_sample_seed(seed, i);
                Ok((0..len)
                    .map(|_| {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        ((x >> 33) % cfg.vocab_size as u64) as usize
                    })
                    .collect())
            }
        })
        .collect()
}

pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Swap(a) => cmd_swap(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<i32> {
    let mut params = TaskParams::default();
    if let Some(d) = a.max_depth {
        params.dyck_max_depth = d;
    }
    if let Some(l) = a.len {
        params.dyck_len = l;
    }
    if let Some(m) = a.motif_len {
        params.motif_len = m;
    }
    let task = TaskSpec::new(a.task, params)?;
    let mut lines = Vec::with_capacity(a.count);
    let mut valid = 0;
    for i in 0..a.count as u64 {
        let s = task.sample(a.seed.wrapping_add(i))?;
        valid += task.validate(&s)? as usize;
        lines.push(task.dump_line(&s)?);
    }
    let fill = |w: &mut dyn Write| -> io::Result<()> {
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    };
    match &a.out {
        Some(p) => write_atomic(p, fill)?,
        None => fill(&mut io::stdout().lock())?,
    }
    eprintln!("{} samples, {valid}/{} pass the {} oracle", a.count, a.count, task.kind.name());
    Ok(if valid == a.count { EXIT_OK } else { EXIT_NUMERIC })
}

/// Output files of one training run.
pub struct RunFiles;

impl RunFiles {
    pub const CHECKPOINT: &'static str = "model.srpl";
    pub const HISTORY: &'static str = "history.csv";
    pub const SUMMARY: &'static str = "summary.json";

    pub fn basis(layer: usize) -> String {
        format!("basis_layer{layer}.csv")
    }
}

fn run_one(cfg: &ExperimentConfig, task: &TaskSpec, engine: RotationEngineKind, seed: u64, dir: &Path) -> Result<RunHistory> {
    let mut model = build_model(cfg.model_config(task, engine), seed)?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let history = train(&mut model, task, &tcfg)?;
    fs::create_dir_all(dir)?;
    let ckpt = dir.join(RunFiles::CHECKPOINT);
    let tmp = NamedTempFile::new_in(dir)?;
    write_checkpoint(tmp.path(), &model, &[task_meta(task)])?;
    tmp.persist(&ckpt).map_err(|e| SrplError::Io(e.error))?;
    write_atomic(&dir.join(RunFiles::HISTORY), |w| history.write_loss_csv(w))?;
    for l in 0..history.num_layers() {
        write_atomic(&dir.join(RunFiles::basis(l)), |w| history.write_snapshot_csv(l, w))?;
    }
    let distance = (task.kind == TaskKind::BioRotation)
        .then(|| bio_distance(task, cfg.train.eval_samples.max(1), seed))
        .transpose()?;
    write_json(&dir.join(RunFiles::SUMMARY), &summarize(&history, distance, None)?)?;
    Ok(history)
}

fn bio_distance(task: &TaskSpec, n: usize, seed: u64) -> Result<usize> {
    let samples = (0..n as u64)
        .map(|i| task.sample(eval_sample_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    task_distance(&samples)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = ExperimentConfig::from_args(a)?;
    let tasks = cfg.tasks()?;
    let [task] = tasks.as_slice() else {
        return Err(SrplError::input("`train` needs a single task"));
    };
    let h = run_one(&cfg, task, cfg.engine, cfg.train.seed, &cfg.out)?;
    println!(
        "{} {} seed {}: final loss {:.6} ({} steps) -> {}",
        task.kind.name(),
        cfg.engine.as_str(),
        cfg.train.seed,
        h.final_loss(),
        h.losses.len(),
        cfg.out.display()
    );
    Ok(if h.final_loss().is_finite() { EXIT_OK } else { EXIT_NUMERIC })
}

#[derive(Serialize)]
struct EvalReport {
    task: &'static str,
    engine: &'static str,
    loss: f64,
    accuracy: f64,
    samples: usize,
}

fn load(path: &Path) -> Result<(Model, Vec<(String, Tensor)>)> {
    if !path.exists() {
        return Err(SrplError::Missing(format!("checkpoint {} does not exist", path.display())));
    }
    read_checkpoint(path)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let (model, extra) = load(&a.checkpoint)?;
    let task = match (a.task, task_from_meta(&extra)?) {
        (Some(k), Some(t)) if k == t.kind => t,
        (Some(k), _) => TaskSpec::with_defaults(k),
        (None, Some(t)) => t,
        (None, None) => return Err(SrplError::input("checkpoint has no task metadata; pass --task")),
    };
    let r = evaluate(&model, &task, a.samples, a.seed)?;
    let report = EvalReport {
        task: task.kind.name(),
        engine: model.engine().as_str(),
        loss: r.loss,
        accuracy: r.accuracy,
        samples: r.samples,
    };
    println!("{}", serde_json::to_string(&report).map_err(|e| SrplError::format(e.to_string()))?);
    Ok(EXIT_OK)
}

pub const SWAP_PROBES: usize = 64;

fn cmd_swap(a: &SwapArgs) -> Result<i32> {
    let (model, extra) = load(&a.input)?;
    let swapped = model.surgical_swap()?;
    let task = task_from_meta(&extra)?;
    let probes = probe_batch(&model, task.as_ref(), SWAP_PROBES, a.seed)?;
    let delta = max_logit_delta(&model, &swapped, &probes)?;
    let tmp = NamedTempFile::new_in(a.output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    write_checkpoint(tmp.path(), &swapped, &extra)?;
    tmp.persist(&a.output).map_err(|e| SrplError::Io(e.error))?;
    println!("max |delta logits| over {SWAP_PROBES} probe sequences: {delta:?}");
    Ok(if delta == 0.0 { EXIT_OK } else { EXIT_NUMERIC })
}

fn worker_count(cells: usize) -> usize {
    let cap = std::env::var("SRPL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(cells).max(1)
}

fn cmd_compare(a: &TrainArgs) -> Result<i32> {
    let mut cfg = ExperimentConfig::from_args(a)?;
    if a.task.is_none() {
        cfg.task = "all".into();
    }
    let tasks = cfg.tasks()?;
    let mut cells = Vec::new();
    for task in &tasks {
        for &seed in &cfg.seeds {
            for engine in [RotationEngineKind::Standard, RotationEngineKind::Spectral] {
                cells.push((task.clone(), engine, seed));
            }
        }
    }
    let workers = worker_count(cells.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<RunHistory>>>> = cells.iter().map(|_| Default::default()).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((task, engine, seed)) = cells.get(i) else {
                    break;
                };
                let dir = cfg
                    .out
                    .join(format!("{}_{}_seed{}", task.kind.name(), engine.as_str(), seed));
                let r = run_one(&cfg, task, *engine, *seed, &dir);
                if let Ok(h) = &r {
                    eprintln!("{} {} seed {seed}: final loss {:.6}", task.kind.name(), engine.as_str(), h.final_loss());
                }
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let runs = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    let table = loss_compare(&runs)?;
    write_atomic(&cfg.out.join("compare.csv"), |w| table.write_csv(w))?;
    write_atomic(&cfg.out.join("curves.csv"), |w| write_curves_csv(&runs, w))?;
    write_json(&cfg.out.join("compare.json"), &table)?;
    print!("{}", table.render());
    Ok(EXIT_OK)
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<i32> {
    let out = a.out.clone().unwrap_or_else(|| a.run.join("diagnostics"));
    let kinds: Vec<&str> = a.report.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for k in &kinds {
        if !["zigzag", "depth", "resonance"].contains(k) {
            return Err(SrplError::input(format!("unknown report `{k}` (expected zigzag, depth, resonance)")));
        }
    }
    let snapshots = || -> Result<Vec<crate::train::BasisSnapshot>> {
        let mut files = Vec::new();
        for l in 0.. {
            let p = a.run.join(RunFiles::basis(l));
            if !p.exists() {
                break;
            }
            files.push(BufReader::new(File::open(p)?));
        }
        if files.is_empty() {
            return Err(SrplError::Missing(format!(
                "basis snapshot files ({}) not found in {}",
                RunFiles::basis(0),
                a.run.display()
            )));
        }
        let snaps = read_snapshot_csvs::<BufReader<File>>(files)?;
        if snaps.is_empty() {
            return Err(SrplError::Missing("basis snapshot files contain no rows".into()));
        }
        Ok(snaps)
    };
    let load_run = || -> Result<(Model, TaskSpec)> {
        let (model, extra) = load(&a.run.join(RunFiles::CHECKPOINT))?;
        let task = task_from_meta(&extra)?.ok_or_else(|| SrplError::Missing("checkpoint has no task metadata".into()))?;
        Ok((model, task))
    };
    for kind in kinds {
        match kind {
            "zigzag" => {
                let snaps = snapshots()?;
                let (first, last) = (&snaps[0], &snaps[snaps.len() - 1]);
                for (l, (b0, b1)) in first.bases.iter().zip(&last.bases).enumerate() {
                    let r = zigzag_report(b0, b1)?;
                    write_atomic(&out.join(format!("zigzag_layer{l}.csv")), |w| r.write_csv(w))?;
                    write_json(&out.join(format!("zigzag_layer{l}.json")), &r)?;
                    println!(
                        "zigzag layer {l}: mean |dphi| {:.3e} (reference {:.1e}), alternation {:.3}",
                        r.mean_abs_shift, r.reference_mean_shift, r.alternation_rate
                    );
                }
            }
            "depth" => {
                let (model, task) = load_run()?;
                if task.kind != TaskKind::Dyck3 {
                    return Err(SrplError::input("depth probe needs a Dyck-3 run"));
                }
                let samples = (0..a.samples as u64)
                    .map(|i| task.sample(eval_sample_seed(a.seed, i)))
                    .collect::<Result<Vec<_>>>()?;
                let r = depth_probe(&model, &task, &samples, task.params.dyck_max_depth)?;
                write_atomic(&out.join("depth_gram.csv"), |w| r.write_gram_csv(w))?;
                write_atomic(&out.join("depth_projection.csv"), |w| r.write_projection_csv(w))?;
                let adj: Vec<String> = r
                    .adjacent
                    .iter()
                    .map(|v| v.map_or_else(|| "absent".into(), |x| format!("{x:.3}")))
                    .collect();
                println!("depth probe: bucket counts {:?}", r.counts);
                println!("depth probe: adjacent-depth cosine [{}]", adj.join(", "));
            }
            _ => {
                let snaps = snapshots()?;
                let n = match a.distance {
                    Some(n) => n,
                    None => {
                        let (_, task) = load_run()?;
                        if task.kind != TaskKind::BioRotation {
                            return Err(SrplError::Missing("resonance audit needs --distance for non-Bio runs".into()));
                        }
                        bio_distance(&task, a.samples.max(1), a.seed)?
                    }
                };
                let t = resonance_audit(&snaps, n)?;
                write_atomic(&out.join("resonance.csv"), |w| t.write_csv(w))?;
                println!(
                    "resonance N={n}: best cos(omega N) {:.6} at step 0 -> {:.6} at step {}",
                    t.initial(),
                    t.final_value(),
                    t.points.last().map_or(0, |p| p.step)
                );
            }
        }
    }
    Ok(EXIT_OK)
}

/// Reads a dump file back into samples (used by round-trip checks).
pub fn read_dump(task: &TaskSpec, r: impl BufRead) -> Result<Vec<crate::tasks::TaskSample>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| task.parse_line(&l?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_keys() {
        let mut c = ExperimentConfig::default();
        c.apply_file_text("steps = 7 # short\n\nbasis_learning_rate=0.01\nuntied_phase = true\n")
            .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.basis_learning_rate, 0.01);
        assert!(c.model.untied_phase);
        let e = c.apply_file_text("stpes = 3").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_USAGE);
        assert!(e.to_string().contains("stpes"));
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let mut c = ExperimentConfig::default();
        for k in CONFIG_KEYS {
            let v = match *k {
                "task" => "bio",
                "engine" => "standard",
                "out" => "x",
                "seeds" => "1,2",
                "untied_phase" | "freeze_basis" => "false",
                "learning_rate" | "basis_learning_rate" | "adam_beta1" | "adam_beta2" | "adam_eps" | "rope_base" => "0.5",
                _ => "4",
            };
            c.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "steps = 9\nseed = 4\n").unwrap();
        let args = TrainArgs {
            config: Some(p),
            steps: Some(2),
            ..Default::default()
        };
        let c = ExperimentConfig::from_args(&args).unwrap();
        assert_eq!((c.train.steps, c.train.seed), (2, 4));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(["srpl", "gen", "nonsense"]), EXIT_USAGE);
        assert_eq!(run_cli(["srpl", "frobnicate"]), EXIT_USAGE);
    }
}
