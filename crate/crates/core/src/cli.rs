//! Command-line interface: `train`, `merge`, `eval` and `sweep`.
//!
//! Every command rebuilds the base model and task suite from the
//! experiment config, so results depend only on the config and seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapter_file::{self, hex, AdapterFile};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::{self, Descriptor, EvalResult, ExpertPool, Group};
use crate::merging::{self, Expert, MergeMethod, MergeSpec, Merged};
use crate::model::{build_model, Model, Site, WeightDelta};
use crate::numerics::Rng;
use crate::saliency::Criterion;
use crate::taskgen::{build_suite, Dataset, Suite};
use crate::trainer::{self, dataset_loss, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "spadapt",
    version,
    about = "Train, merge and evaluate sparse adapters on synthetic tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one expert per selected task.
    Train(TrainArgs),
    /// Merge expert files into one.
    Merge(MergeArgs),
    /// Evaluate expert files on suite tasks and write a CSV.
    Eval(EvalArgs),
    /// Run a sweep and write its report as JSON.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Sparse,
    BlockSparse,
    Lora,
    Full,
    Multitask,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "sparse")]
    pub method: TrainMethod,
    #[arg(long)]
    pub kr: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub criterion: Option<String>,
    /// `held-in`, `held-out`, `all`, or a comma-separated list of task ids.
    #[arg(long, default_value = "held-in")]
    pub tasks: String,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Merge method; defaults to `merge.method` from the config.
    #[arg(long)]
    pub merge: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fraction of entries TIES keeps per task vector.
    #[arg(long)]
    pub trim: Option<f64>,
    /// Output file; defaults to `merged.sadp` in the output directory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "all")]
    pub tasks: String,
    /// Also evaluate the base model with no delta.
    #[arg(long)]
    pub base: bool,
    /// Output CSV; defaults to `eval.csv` in the output directory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// experts, kr, block-size, layers, criterion, schedule, layer-drop or recycle.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub kr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Merge method for dense experts in the experts sweep.
    #[arg(long)]
    pub merge: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub trim: Option<f64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
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
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric { .. } | Error::Training { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Merge(a) => cmd_merge(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

/// Loads the config and applies the common flags.
pub fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        let d = &mut cfg.desk;
        d.seed = s;
        d.suite.seed = s;
        d.train.seed = s;
        d.multitask.seed = s;
    }
    if let Some(dir) = &c.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(w) = c.workers {
        if w == 0 {
            return Err(Error::Input("--workers must be positive".into()));
        }
        cfg.desk.workers = w;
    }
    Ok(cfg)
}

/// Base model and suite for a config.
pub fn setup(cfg: &ExperimentConfig) -> Result<(Model, Suite)> {
    let model = build_model(cfg.desk.model.clone(), &mut Rng::new(cfg.desk.seed).fork(1))?;
    let suite = build_suite(&cfg.desk.suite)?;
    Ok((model, suite))
}

fn select<'a>(suite: &'a Suite, selector: &str) -> Result<Vec<(&'a Dataset, Group)>> {
    let held_in = suite.held_in.iter().map(|d| (d, Group::HeldIn));
    let held_out = suite.held_out.iter().map(|d| (d, Group::HeldOut));
    Ok(match selector {
        "held-in" => held_in.collect(),
        "held-out" => held_out.collect(),
        "all" => held_in.chain(held_out).collect(),
        ids => {
            let all: Vec<_> = held_in.chain(held_out).collect();
            ids.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|id| {
                    all.iter()
                        .find(|(d, _)| d.id() == id)
                        .copied()
                        .ok_or_else(|| Error::Input(format!("no task with id {id:?}")))
                })
                .collect::<Result<_>>()?
        }
    })
}

#[derive(Serialize)]
struct LogRow<'a> {
    task_id: &'a str,
    method: &'a str,
    file: String,
    sha256: String,
    trainable: usize,
    train_loss: f64,
    val_loss: f64,
    test_accuracy: f64,
}

fn train_config(cfg: &ExperimentConfig, a: &TrainArgs) -> Result<TrainConfig> {
    let mut t = cfg.desk.train.clone();
    if let Some(kr) = a.kr {
        t.kr = kr;
    }
    if let Some(c) = &a.criterion {
        t.criterion = Criterion::parse(c)?;
    }
    match a.method {
        TrainMethod::BlockSparse => {
            t.block_size = a.block_size.or(t.block_size);
            if t.block_size.is_none() {
                return Err(Error::Input(
                    "block-sparse training needs --block-size".into(),
                ));
            }
        }
        _ if a.block_size.is_some() => {
            return Err(Error::Input(
                "--block-size only applies to block-sparse training".into(),
            ));
        }
        TrainMethod::Sparse => t.block_size = None,
        _ => {}
    }
    t.validate()?;
    Ok(t)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let t = train_config(&cfg, a)?;
    let rank = a.rank.unwrap_or(cfg.desk.lora_rank);
    let (model, suite) = setup(&cfg)?;
    let tasks = select(&suite, &a.tasks)?;
    if tasks.is_empty() {
        return Err(Error::Input("no tasks selected".into()));
    }
    let method = a
        .method
        .to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string();
    let experts: Vec<(String, Expert, Vec<&Dataset>)> = if a.method == TrainMethod::Multitask {
        let sets: Vec<&Dataset> = tasks.iter().map(|(d, _)| *d).collect();
        let mut mt = cfg.desk.multitask.clone();
        mt.seed = t.seed;
        let mut tv = trainer::train_multitask(&model, &sets, &mt)?;
        tv.task_id = "multitask".into();
        vec![("multitask".into(), Expert::Dense(tv), sets)]
    } else {
        let trained = harness::par_map(cfg.desk.workers, &tasks, |(d, _)| {
            Ok(match a.method {
                TrainMethod::Sparse | TrainMethod::BlockSparse => {
                    Expert::Sparse(trainer::train_sparse(&model, d, &t)?)
                }
                TrainMethod::Lora => Expert::Lora(trainer::train_lora(
                    &model,
                    d,
                    rank,
                    cfg.desk.lora_alpha,
                    &t,
                )?),
                TrainMethod::Full => Expert::Dense(trainer::train_full(&model, d, &t)?),
                TrainMethod::Multitask => unreachable!(),
            })
        })?;
        tasks
            .iter()
            .zip(trained)
            .map(|((d, _), e)| (d.id().to_string(), e, vec![*d]))
            .collect()
    };

    let mut log = csv::Writer::from_writer(Vec::new());
    for (name, expert, sets) in &experts {
        let path = cfg.out_dir.join(format!("{name}.sadp"));
        let hash = adapter_file::write_file(&path, &AdapterFile::new(expert.clone()))?;
        let delta = expert_delta(expert);
        let (train_loss, val_loss) = match expert {
            Expert::Sparse(s) => (s.train_loss, s.val_loss),
            _ => {
                let (tr, va): (Vec<_>, Vec<_>) = sets
                    .iter()
                    .map(|d| (d.train.clone(), d.val.clone()))
                    .unzip();
                (
                    dataset_loss(&model, delta, &tr.concat())?,
                    dataset_loss(&model, delta, &va.concat())?,
                )
            }
        };
        let mut correct = 0;
        let mut total = 0;
        for d in sets {
            let (c, n) = harness::correct_count(&model, delta, &d.test)?;
            correct += c;
            total += n;
        }
        log.serialize(LogRow {
            task_id: name,
            method: &method,
            file: path.display().to_string(),
            sha256: hex(&hash),
            trainable: trainable(expert),
            train_loss,
            val_loss,
            test_accuracy: correct as f64 / total.max(1) as f64,
        })
        .map_err(csv_err)?;
    }
    let bytes = log
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    adapter_file::write_atomic(&cfg.out_dir.join("train_log.csv"), &bytes)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn trainable(e: &Expert) -> usize {
    match e {
        Expert::Sparse(a) => a.trainable_count(),
        Expert::Dense(t) => t.layers.values().map(|m| m.len()).sum(),
        Expert::Lora(l) => l.layers.values().map(|x| x.a.len() + x.b.len()).sum(),
    }
}

fn expert_delta(e: &Expert) -> &dyn WeightDelta {
    match e {
        Expert::Sparse(a) => a,
        Expert::Dense(t) => t,
        Expert::Lora(l) => l,
    }
}

fn layer_shapes(e: &Expert) -> Vec<(Site, (usize, usize))> {
    match e {
        Expert::Sparse(a) => a
            .layers
            .iter()
            .map(|(s, l)| (*s, l.values.shape()))
            .collect(),
        Expert::Dense(t) => t.layers.iter().map(|(s, m)| (*s, m.shape())).collect(),
        Expert::Lora(l) => l
            .layers
            .iter()
            .map(|(s, x)| (*s, (x.a.rows(), x.b.cols())))
            .collect(),
    }
}

/// Resolves the merge spec from the config and the merge flags.
pub fn merge_spec(
    base: &MergeSpec,
    method: Option<&str>,
    lambda: Option<f64>,
    trim: Option<f64>,
) -> Result<MergeSpec> {
    let mut spec = *base;
    if let Some(m) = method {
        let m = MergeMethod::parse(m)?;
        if m != spec.method {
            spec.method = m;
            spec.lambda = m.default_lambda();
        }
    }
    if let Some(l) = lambda {
        spec.lambda = l;
    }
    if let Some(t) = trim {
        spec.ties_trim_fraction = t;
    }
    spec.validate()?;
    Ok(spec)
}

/// Reads expert files, merges them and returns the merged file, which
/// lists the input hashes as provenance.
pub fn merge_files(spec: &MergeSpec, inputs: &[PathBuf]) -> Result<AdapterFile> {
    let mut experts = Vec::new();
    let mut provenance = Vec::new();
    for p in inputs {
        let (f, h) = adapter_file::read_file(p)?;
        experts.push(f.expert);
        provenance.push(h);
    }
    let Some(first) = experts.first() else {
        return Err(Error::Input("nothing to merge".into()));
    };
    let reference = layer_shapes(first);
    let offending: Vec<String> = inputs
        .iter()
        .zip(&experts)
        .filter(|(_, e)| layer_shapes(e) != reference)
        .map(|(p, _)| p.display().to_string())
        .collect();
    if !offending.is_empty() {
        return Err(Error::Dimension(format!(
            "layer shapes differ from {}: {}",
            inputs[0].display(),
            offending.join(", ")
        )));
    }
    let refs: Vec<&Expert> = experts.iter().collect();
    let expert = match merging::merge(spec, &refs)? {
        Merged::Sparse(a) => Expert::Sparse(a),
        Merged::Dense(t) => Expert::Dense(t),
    };
    Ok(AdapterFile { expert, provenance })
}

fn cmd_merge(a: &MergeArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let spec = merge_spec(&cfg.merge, a.merge.as_deref(), a.lambda, a.trim)?;
    let file = merge_files(&spec, &a.inputs)?;
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("merged.sadp"));
    let hash = adapter_file::write_file(&out, &file)?;
    println!("{} {}", hex(&hash), out.display());
    Ok(())
}

fn descriptor(file: &AdapterFile, path: &Path) -> Descriptor {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let d = match &file.expert {
        Expert::Sparse(a) => Descriptor::new(&format!("sparse:{stem}")).kr(a.config.kr),
        Expert::Dense(_) => Descriptor::new(&format!("dense:{stem}")),
        Expert::Lora(l) => Descriptor::new(&format!("lora:{stem}")).rank(l.rank),
    };
    if file.provenance.is_empty() {
        d
    } else {
        Descriptor {
            merge: Some(format!("merged({})", file.provenance.len())),
            ..d
        }
    }
}

/// Evaluation rows for every (file, task) pair, files in input order.
pub fn eval_files(
    cfg: &ExperimentConfig,
    inputs: &[PathBuf],
    tasks: &str,
    base: bool,
) -> Result<Vec<EvalResult>> {
    let (model, suite) = setup(cfg)?;
    let selected = select(&suite, tasks)?;
    let mut models: Vec<(Box<dyn WeightDelta>, Descriptor)> = Vec::new();
    if base {
        models.push((Box::new(crate::model::NoDelta), Descriptor::new("base")));
    }
    for p in inputs {
        let (f, _) = adapter_file::read_file(p)?;
        let d = descriptor(&f, p);
        let delta: Box<dyn WeightDelta> = match f.expert {
            Expert::Sparse(a) => Box::new(a),
            Expert::Dense(t) => Box::new(t),
            Expert::Lora(l) => Box::new(l),
        };
        models.push((delta, d));
    }
    if models.is_empty() {
        return Err(Error::Input(
            "nothing to evaluate: pass expert files or --base".into(),
        ));
    }
    let mut rows = Vec::new();
    for (delta, desc) in &models {
        for (task, group) in &selected {
            rows.push(harness::evaluate(
                &model,
                delta.as_ref(),
                task,
                *group,
                desc,
                cfg.desk.seed,
            )?);
        }
    }
    Ok(rows)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let rows = eval_files(&cfg, &a.inputs, &a.tasks, a.base)?;
    let mut buf = Vec::new();
    harness::write_csv(&rows, &mut buf)?;
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("eval.csv"));
    adapter_file::write_atomic(&out, &buf)?;
    println!("{} rows {}", rows.len(), out.display());
    Ok(())
}

/// Runs one sweep on the held-in tasks of the configured suite.
pub fn run_sweep(cfg: &ExperimentConfig, a: &SweepArgs) -> Result<harness::SweepReport> {
    let (model, suite) = setup(cfg)?;
    let tasks: Vec<&Dataset> = suite.held_in.iter().collect();
    let mut t = cfg.desk.train.clone();
    if let Some(kr) = a.kr {
        t.kr = kr;
    }
    t.validate()?;
    let w = cfg.desk.workers;
    match harness::SweepAxis::parse(&a.kind)? {
        harness::SweepAxis::Experts => {
            let n_grid = a.n_grid.clone().unwrap_or_else(|| cfg.desk.n_grid.clone());
            let dense_spec = merge_spec(
                &MergeSpec::new(MergeMethod::Uniform),
                a.merge.as_deref(),
                a.lambda,
                a.trim,
            )?;
            let sparse = harness::par_map(w, &tasks, |d| {
                Ok(Expert::Sparse(trainer::train_sparse(&model, d, &t)?))
            })?;
            let dense = harness::par_map(w, &tasks, |d| {
                Ok(Expert::Dense(trainer::train_full(&model, d, &t)?))
            })?;
            let pools = vec![
                ExpertPool {
                    name: MergeMethod::SparseOverlap.name().into(),
                    spec: MergeSpec::new(MergeMethod::SparseOverlap),
                    experts: sparse,
                },
                ExpertPool {
                    name: format!("fft-{}", dense_spec.method.name()),
                    spec: dense_spec,
                    experts: dense,
                },
            ];
            harness::scaling_sweep(
                &model,
                &tasks,
                &pools,
                &n_grid,
                cfg.desk.scaling_trials,
                cfg.desk.seed,
            )
        }
        harness::SweepAxis::KeepRatio => harness::kr_sweep(&model, &tasks, &t, &cfg.kr_grid, w),
        harness::SweepAxis::BlockSize => {
            harness::block_size_sweep(&model, &tasks, &t, &cfg.block_grid, w)
        }
        harness::SweepAxis::Layers => {
            harness::layers_sweep(&model, &tasks, &t, &harness::layer_grid(), w)
        }
        harness::SweepAxis::Criterion => harness::criteria_sweep(&model, &tasks, &t, w),
        harness::SweepAxis::Schedule => harness::schedule_sweep(&model, &tasks, &t, w),
        harness::SweepAxis::LayerDrop => {
            harness::layer_drop_sweep(&model, &tasks, &t, &cfg.kr_grid, w)
        }
        harness::SweepAxis::Recycle => {
            harness::recycle_experiment(&model, &tasks, &t, cfg.recycle_epochs, w)
        }
    }
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let report = run_sweep(&cfg, a)?;
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(format!("sweep_{}.json", a.kind)));
    adapter_file::write_atomic(&out, report.to_json().as_bytes())?;
    let summary: BTreeMap<&str, usize> = report
        .series
        .iter()
        .map(|s| (s.name.as_str(), s.points.len()))
        .collect();
    println!("{} {summary:?}", out.display());
    Ok(())
}
