//! Evaluation, interference analysis, sweeps and the desk-scale experiment
//! bundle.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::merging::{merge, merge_sparse, Expert, MergeMethod, MergeSpec, Merged, TaskVector};
use crate::model::{
    build_model, logits, AdaptTarget, LayerDelta, Model, ModelConfig, Site, WeightDelta,
};
use crate::numerics::Rng;
use crate::saliency::Criterion;
use crate::taskgen::{batch, build_suite_gated, Dataset, Example, Suite, SuiteConfig};
use crate::trainer::{
    recycle_finetune, train_full, train_lora, train_multitask, train_sparse, Adapter, RecycleMode,
    Recycled, TrainConfig,
};

/// Number of correct predictions and total examples. Ties in the logits go
/// to the lowest class index.
pub fn correct_count(
    model: &Model,
    delta: &dyn WeightDelta,
    examples: &[Example],
) -> Result<(usize, usize)> {
    let seq = model.config().seq_len;
    let mut correct = 0;
    for chunk in examples.chunks(256) {
        let out = logits(model, delta, &batch(chunk, seq))?;
        for (i, ex) in chunk.iter().enumerate() {
            let row = out.row(i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            correct += usize::from(best as u32 == ex.label);
        }
    }
    Ok((correct, examples.len()))
}

pub fn accuracy(model: &Model, delta: &dyn WeightDelta, examples: &[Example]) -> Result<f64> {
    let (c, n) = correct_count(model, delta, examples)?;
    Ok(c as f64 / n.max(1) as f64)
}

/// Which part of a suite a task belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    HeldIn,
    HeldOut,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::HeldIn => "held-in",
            Group::HeldOut => "held-out",
        }
    }
}

/// Describes the model an evaluation was run with.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Descriptor {
    pub method: String,
    pub kr: Option<f64>,
    pub rank: Option<usize>,
    pub merge: Option<String>,
}

impl Descriptor {
    pub fn new(method: &str) -> Self {
        Self {
            method: method.to_string(),
            ..Self::default()
        }
    }

    pub fn kr(self, kr: f64) -> Self {
        Self {
            kr: Some(kr),
            ..self
        }
    }

    pub fn rank(self, rank: usize) -> Self {
        Self {
            rank: Some(rank),
            ..self
        }
    }

    pub fn merged(self, spec: &MergeSpec) -> Self {
        let text = match spec.method {
            MergeMethod::TaskArithmetic => {
                format!("{}(lambda={})", spec.method.name(), spec.lambda)
            }
            MergeMethod::Ties => format!(
                "{}(lambda={},trim={})",
                spec.method.name(),
                spec.lambda,
                spec.ties_trim_fraction
            ),
            MergeMethod::Breadcrumbs => format!(
                "{}(lambda={},top={},bottom={})",
                spec.method.name(),
                spec.lambda,
                spec.breadcrumbs_top,
                spec.breadcrumbs_bottom
            ),
            m => m.name().to_string(),
        };
        Self {
            merge: Some(text),
            ..self
        }
    }
}

/// One accuracy measurement; written as one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub task_id: String,
    pub group: Group,
    pub metric: &'static str,
    pub value: f64,
    pub correct: usize,
    pub total: usize,
    pub method: String,
    pub kr: Option<f64>,
    pub rank: Option<usize>,
    pub merge: Option<String>,
    pub seed: u64,
}

/// Test-split accuracy with `delta` applied.
pub fn evaluate(
    model: &Model,
    delta: &dyn WeightDelta,
    dataset: &Dataset,
    group: Group,
    descriptor: &Descriptor,
    seed: u64,
) -> Result<EvalResult> {
    if dataset.test.is_empty() {
        return Err(Error::Input(format!(
            "task {} has an empty test split",
            dataset.id()
        )));
    }
    let (correct, total) = correct_count(model, delta, &dataset.test)?;
    Ok(EvalResult {
        task_id: dataset.id().to_string(),
        group,
        metric: "accuracy",
        value: correct as f64 / total as f64,
        correct,
        total,
        method: descriptor.method.clone(),
        kr: descriptor.kr,
        rank: descriptor.rank,
        merge: descriptor.merge.clone(),
        seed,
    })
}

pub fn write_csv(results: &[EvalResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(())
}

/// Maps `f` over `items` on a pool of `workers` threads, keeping order.
pub fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Per-task accuracies with and without other tasks' interference, as
/// correct counts over the same test split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub task_id: String,
    pub total: usize,
    /// The task's own adapter.
    pub single: usize,
    /// The merged delta restricted to the task's own mask.
    pub masked_only: usize,
    /// The full merged delta.
    pub full_merged: usize,
}

impl Decomposition {
    pub fn accuracies(&self) -> (f64, f64, f64) {
        let n = self.total as f64;
        (
            self.single as f64 / n,
            self.masked_only as f64 / n,
            self.full_merged as f64 / n,
        )
    }

    /// Loss in correct predictions due to interference inside the mask.
    pub fn masked_gap(&self) -> i64 {
        self.single as i64 - self.masked_only as i64
    }

    /// Further loss once the other tasks' out-of-mask updates apply.
    pub fn unmasked_gap(&self) -> i64 {
        self.masked_only as i64 - self.full_merged as i64
    }

    pub fn total_gap(&self) -> i64 {
        self.single as i64 - self.full_merged as i64
    }
}

/// Merged values seen through one task's mask.
struct Restricted<'a> {
    merged: &'a Adapter,
    own: &'a Adapter,
}

impl WeightDelta for Restricted<'_> {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
        self.own
            .layers
            .iter()
            .map(|(site, l)| {
                (
                    *site,
                    LayerDelta::Sparse {
                        values: &self.merged.layers[site].values,
                        mask: Some(&l.mask),
                    },
                )
            })
            .collect()
    }
}

pub fn interference_decomposition(
    model: &Model,
    merged: &Adapter,
    adapters: &[&Adapter],
    tasks: &[&Dataset],
) -> Result<Vec<Decomposition>> {
    if adapters.len() != tasks.len() {
        return Err(Error::Input(format!(
            "{} adapters for {} tasks",
            adapters.len(),
            tasks.len()
        )));
    }
    adapters
        .iter()
        .zip(tasks)
        .map(|(a, t)| {
            if a.task_id != t.id() {
                return Err(Error::Input(format!(
                    "adapter {:?} does not belong to task {:?}",
                    a.task_id,
                    t.id()
                )));
            }
            for (site, l) in &a.layers {
                let m = merged
                    .layers
                    .get(site)
                    .ok_or_else(|| Error::Input(format!("merged adapter lacks layer {site}")))?;
                if m.values.shape() != l.values.shape() {
                    return Err(Error::Input(format!(
                        "layer {site} shape differs from merged adapter"
                    )));
                }
            }
            let (single, total) = correct_count(model, *a, &t.test)?;
            let (masked_only, _) = correct_count(model, &Restricted { merged, own: a }, &t.test)?;
            let (full_merged, _) = correct_count(model, merged, &t.test)?;
            Ok(Decomposition {
                task_id: t.id().to_string(),
                total,
                single,
                masked_only,
                full_merged,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Experts,
    KeepRatio,
    BlockSize,
    Layers,
    Criterion,
    Schedule,
    LayerDrop,
    Recycle,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "experts" => SweepAxis::Experts,
            "kr" | "keep-ratio" => SweepAxis::KeepRatio,
            "block-size" => SweepAxis::BlockSize,
            "layers" => SweepAxis::Layers,
            "criterion" => SweepAxis::Criterion,
            "schedule" => SweepAxis::Schedule,
            "layer-drop" => SweepAxis::LayerDrop,
            "recycle" => SweepAxis::Recycle,
            other => return Err(Error::Input(format!("unknown sweep kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub x: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl SweepPoint {
    pub fn new(label: impl Into<String>, x: f64, values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            label: label.into(),
            x,
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<SweepPoint>,
}

impl Series {
    pub fn point(&self, label: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.label == label)
    }
}

/// Plot-ready results of one sweep. Points are sorted on the axis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub trials: usize,
    pub seed: u64,
    pub series: Vec<Series>,
}

impl SweepReport {
    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Experts of one kind, aligned with a task list, and how to merge them.
pub struct ExpertPool {
    pub name: String,
    pub spec: MergeSpec,
    pub experts: Vec<Expert>,
}

/// Mean accuracy of each pool's merged expert over randomly drawn task
/// subsets of every size in `n_values`. All pools share the same draws.
pub fn scaling_sweep(
    model: &Model,
    tasks: &[&Dataset],
    pools: &[ExpertPool],
    n_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<SweepReport> {
    if trials == 0 || n_values.is_empty() {
        return Err(Error::Input(
            "scaling sweep needs trials and a non-empty grid".into(),
        ));
    }
    for pool in pools {
        if pool.experts.len() != tasks.len() {
            return Err(Error::Input(format!(
                "pool {} has {} experts for {} tasks",
                pool.name,
                pool.experts.len(),
                tasks.len()
            )));
        }
    }
    let mut grid = n_values.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if let Some(&n) = grid.iter().find(|&&n| n == 0 || n > tasks.len()) {
        return Err(Error::Input(format!(
            "cannot merge {n} of {} experts",
            tasks.len()
        )));
    }
    let mut per_pool: Vec<Vec<SweepPoint>> = vec![Vec::new(); pools.len()];
    for &n in &grid {
        let mut values = vec![Vec::with_capacity(trials); pools.len()];
        for trial in 0..trials {
            let mut rng = Rng::new(seed).fork(((n as u64) << 32) | trial as u64);
            let mut pick = rng.sample_indices(tasks.len(), n);
            pick.sort_unstable();
            for (p, pool) in pools.iter().enumerate() {
                let chosen: Vec<&Expert> = pick.iter().map(|&i| &pool.experts[i]).collect();
                let merged = merge(&pool.spec, &chosen)?;
                let mut acc = 0.0;
                for &i in &pick {
                    acc += accuracy(model, &merged, &tasks[i].test)?;
                }
                values[p].push(acc / n as f64);
            }
        }
        for (p, v) in values.into_iter().enumerate() {
            per_pool[p].push(SweepPoint::new(format!("N={n}"), n as f64, v));
        }
    }
    Ok(SweepReport {
        axis: SweepAxis::Experts,
        trials,
        seed,
        series: pools
            .iter()
            .zip(per_pool)
            .map(|(pool, points)| Series {
                name: pool.name.clone(),
                points,
            })
            .collect(),
    })
}

/// One training configuration in a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub x: f64,
    pub train: TrainConfig,
    /// Adapted layer kinds; the model's own when `None`.
    pub targets: Option<Vec<AdaptTarget>>,
}

/// Trains a sparse adapter per task for every variant and reports the
/// single-task and sparse-merged accuracies (one value per task).
pub fn variant_sweep(
    model: &Model,
    tasks: &[&Dataset],
    axis: SweepAxis,
    variants: &[Variant],
    workers: usize,
) -> Result<SweepReport> {
    if variants.is_empty() {
        return Err(Error::Input("sweep grid is empty".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Input("sweep needs at least one task".into()));
    }
    let mut single = Vec::new();
    let mut merged = Vec::new();
    for v in variants {
        let m = match &v.targets {
            Some(t) => model.with_adapt_targets(t.clone())?,
            None => model.clone(),
        };
        let adapters = par_map(workers, tasks, |t| train_sparse(&m, t, &v.train))?;
        let refs: Vec<&Adapter> = adapters.iter().collect();
        let union = merge_sparse(&refs)?;
        let mut s = Vec::new();
        let mut g = Vec::new();
        for (a, t) in adapters.iter().zip(tasks) {
            s.push(accuracy(&m, a, &t.test)?);
            g.push(accuracy(&m, &union, &t.test)?);
        }
        single.push(SweepPoint::new(v.label.clone(), v.x, s));
        merged.push(SweepPoint::new(v.label.clone(), v.x, g));
    }
    for points in [&mut single, &mut merged] {
        points.sort_by(|a, b| a.x.total_cmp(&b.x));
    }
    Ok(SweepReport {
        axis,
        trials: 1,
        seed: variants[0].train.seed,
        series: vec![
            Series {
                name: "single".into(),
                points: single,
            },
            Series {
                name: "merged".into(),
                points: merged,
            },
        ],
    })
}

pub const KR_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.5, 0.8, 1.0];
pub const BLOCK_GRID: [usize; 4] = [2, 4, 8, 16];

pub fn kr_sweep(
    model: &Model,
    tasks: &[&Dataset],
    base: &TrainConfig,
    kr_values: &[f64],
    workers: usize,
) -> Result<SweepReport> {
    let variants: Vec<Variant> = kr_values
        .iter()
        .map(|&kr| Variant {
            label: format!("kr={kr}"),
            x: kr,
            train: TrainConfig { kr, ..base.clone() },
            targets: None,
        })
        .collect();
    variant_sweep(model, tasks, SweepAxis::KeepRatio, &variants, workers)
}

pub fn block_size_sweep(
    model: &Model,
    tasks: &[&Dataset],
    base: &TrainConfig,
    sizes: &[usize],
    workers: usize,
) -> Result<SweepReport> {
    let variants: Vec<Variant> = sizes
        .iter()
        .map(|&b| Variant {
            label: format!("B={b}"),
            x: b as f64,
            train: TrainConfig {
                block_size: Some(b),
                ..base.clone()
            },
            targets: None,
        })
        .collect();
    variant_sweep(model, tasks, SweepAxis::BlockSize, &variants, workers)
}

/// Adapted-layer choices compared by [`layers_sweep`].
pub fn layer_grid() -> Vec<Vec<AdaptTarget>> {
    vec![
        vec![AdaptTarget::Qkv],
        vec![AdaptTarget::Qkv, AdaptTarget::O],
        vec![AdaptTarget::Mlp],
    ]
}

pub fn layers_sweep(
    model: &Model,
    tasks: &[&Dataset],
    base: &TrainConfig,
    grid: &[Vec<AdaptTarget>],
    workers: usize,
) -> Result<SweepReport> {
    let variants: Vec<Variant> = grid
        .iter()
        .enumerate()
        .map(|(i, t)| Variant {
            label: AdaptTarget::list_name(t),
            x: i as f64,
            train: base.clone(),
            targets: Some(t.clone()),
        })
        .collect();
    variant_sweep(model, tasks, SweepAxis::Layers, &variants, workers)
}

pub fn criteria_sweep(
    model: &Model,
    tasks: &[&Dataset],
    base: &TrainConfig,
    workers: usize,
) -> Result<SweepReport> {
    let variants: Vec<Variant> = Criterion::ALL
        .iter()
        .enumerate()
        .map(|(i, c)| Variant {
            label: c.name().to_string(),
            x: i as f64,
            train: TrainConfig {
                criterion: *c,
                ..base.clone()
            },
            targets: None,
        })
        .collect();
    variant_sweep(model, tasks, SweepAxis::Criterion, &variants, workers)
}

/// Mask selected once at the first refresh versus refreshed throughout the
/// first epoch.
pub fn schedule_sweep(
    model: &Model,
    tasks: &[&Dataset],
    base: &TrainConfig,
    workers: usize,
) -> Result<SweepReport> {
    let variants = vec![
        Variant {
            label: "single-shot".into(),
            x: 0.0,
            train: TrainConfig {
                max_mask_refreshes: Some(1),
                ..base.clone()
            },
            targets: None,
        },
        Variant {
            label: "iterative".into(),
            x: 1.0,
            train: TrainConfig {
                max_mask_refreshes: None,
                ..base.clone()
            },
            targets: None,
        },
    ];
    variant_sweep(model, tasks, SweepAxis::Schedule, &variants, workers)
}

/// With and without layer-drop at each keep ratio.
pub fn layer_drop_sweep(
    model: &Model,
    tasks: &[&Dataset],
    base: &TrainConfig,
    kr_values: &[f64],
    workers: usize,
) -> Result<SweepReport> {
    let mut variants = Vec::new();
    for (i, &kr) in kr_values.iter().enumerate() {
        for drop in [false, true] {
            variants.push(Variant {
                label: format!("kr={kr}{}", if drop { "+drop" } else { "" }),
                x: 2.0 * i as f64 + f64::from(u8::from(drop)),
                train: TrainConfig {
                    kr,
                    layer_drop: drop,
                    ..base.clone()
                },
                targets: None,
            });
        }
    }
    variant_sweep(model, tasks, SweepAxis::LayerDrop, &variants, workers)
}

/// Accuracy of the raw sparse merge, then after second-stage training of
/// only the merged coordinates, and after training the whole model.
pub fn recycle_experiment(
    model: &Model,
    tasks: &[&Dataset],
    base: &TrainConfig,
    epochs: usize,
    workers: usize,
) -> Result<SweepReport> {
    let adapters = par_map(workers, tasks, |t| train_sparse(model, t, base))?;
    let merged = Merged::Sparse(merge_sparse(&adapters.iter().collect::<Vec<_>>())?);
    let mut points = Vec::new();
    let per_task = |m: &Model, d: &dyn WeightDelta| -> Result<Vec<f64>> {
        tasks.iter().map(|t| accuracy(m, d, &t.test)).collect()
    };
    points.push(SweepPoint::new("merged", 0.0, per_task(model, &merged)?));
    for (x, (label, mode)) in [
        ("sparse-only", RecycleMode::SparseOnly),
        ("full", RecycleMode::Full),
    ]
    .into_iter()
    .enumerate()
    {
        let r: Recycled = recycle_finetune(model, &merged, tasks, mode, epochs, base)?;
        let (m, d) = r.parts(model);
        points.push(SweepPoint::new(label, 1.0 + x as f64, per_task(m, d)?));
    }
    Ok(SweepReport {
        axis: SweepAxis::Recycle,
        trials: 1,
        seed: base.seed,
        series: vec![Series {
            name: "held-in".into(),
            points,
        }],
    })
}

/// Everything one desk-scale experiment bundle needs.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskConfig {
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    /// Single-task training, shared by sparse, dense and LoRA experts.
    pub train: TrainConfig,
    pub multitask: TrainConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Dense-expert merge baselines.
    pub baselines: Vec<MergeSpec>,
    /// Additional keep ratios compared against dense training.
    pub kr_compare: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub scaling_trials: usize,
    /// Minimum dense fine-tuning test accuracy for a held-in task.
    pub gate_accuracy: f64,
    pub workers: usize,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        let model = ModelConfig {
            vocab_size: suite.vocab_size(),
            num_classes: suite.num_classes,
            seq_len: suite.seq_len,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            learning_rate: 1e-2,
            mask_refresh_interval: 10,
            ..TrainConfig::default()
        };
        Self {
            suite,
            model,
            multitask: train.clone(),
            train,
            lora_rank: 4,
            lora_alpha: 8.0,
            baselines: vec![
                MergeSpec::new(MergeMethod::Uniform),
                MergeSpec::new(MergeMethod::TaskArithmetic),
                MergeSpec::new(MergeMethod::Ties),
                MergeSpec::new(MergeMethod::Breadcrumbs),
            ],
            kr_compare: vec![0.5],
            n_grid: vec![2, 4, 8],
            scaling_trials: 10,
            gate_accuracy: 0.9,
            workers: 1,
            seed: 0,
        }
    }
}

impl DeskConfig {
    /// Keeps the model's vocabulary, class count and sequence length in
    /// step with the suite.
    pub fn sync_model(&mut self) {
        self.model.vocab_size = self.suite.vocab_size();
        self.model.num_classes = self.suite.num_classes;
        self.model.seq_len = self.suite.seq_len;
    }

    /// The configuration with every seed derived from `bundle`.
    pub fn for_bundle(&self, bundle: u64) -> DeskConfig {
        let root = Rng::new(self.seed).fork(bundle);
        let mut cfg = self.clone();
        let mut r = root.clone();
        cfg.suite.seed = r.next_u64();
        cfg.train.seed = r.next_u64();
        cfg.multitask.seed = r.next_u64();
        cfg.seed = r.next_u64();
        cfg
    }
}

/// Held-in and held-out mean accuracy of one model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodScore {
    pub method: String,
    pub held_in: f64,
    pub held_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BundleReport {
    pub seed: u64,
    pub gate_rejections: usize,
    /// Mean held-in single-task accuracy per training mode.
    pub single: Vec<MethodScore>,
    /// Merged experts, and the multitask model, scored on both groups.
    pub merged: Vec<MethodScore>,
    pub decomposition: Vec<Decomposition>,
    pub scaling: SweepReport,
    pub results: Vec<EvalResult>,
}

impl BundleReport {
    pub fn single_score(&self, method: &str) -> Option<f64> {
        self.single
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.held_in)
    }

    pub fn merged_score(&self, method: &str) -> Option<f64> {
        self.merged
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.held_in)
    }
}

/// Label of a single-task sparse run at `kr`.
pub fn sparse_label(kr: f64) -> String {
    format!("sparse(kr={kr})")
}

/// Builds the held-in gated suite, returning dense experts trained while
/// gating alongside it.
pub fn gated_suite(
    cfg: &DeskConfig,
    model: &Model,
) -> Result<(Suite, BTreeMap<String, TaskVector>, usize)> {
    let mut dense = BTreeMap::new();
    let mut rejected = 0;
    let suite = build_suite_gated(&cfg.suite, &mut |task| {
        let tv = train_full(model, task, &cfg.train)?;
        if accuracy(model, &tv, &task.test)? > cfg.gate_accuracy {
            dense.insert(task.id().to_string(), tv);
            Ok(true)
        } else {
            rejected += 1;
            Ok(false)
        }
    })?;
    Ok((suite, dense, rejected))
}

/// Mean of `f` over tasks.
fn mean_over(tasks: &[&Dataset], mut f: impl FnMut(&Dataset) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    for t in tasks {
        total += f(t)?;
    }
    Ok(total / tasks.len().max(1) as f64)
}

/// Trains every expert kind on a gated suite, merges, and evaluates.
pub fn run_bundle(cfg: &DeskConfig) -> Result<BundleReport> {
    let model = build_model(cfg.model.clone(), &mut Rng::new(cfg.seed).fork(1))?;
    let (suite, mut dense, gate_rejections) = gated_suite(cfg, &model)?;
    let held_in: Vec<&Dataset> = suite.held_in.iter().collect();
    let held_out: Vec<&Dataset> = suite.held_out.iter().collect();
    let w = cfg.workers;
    let seed = cfg.seed;
    let mut results = Vec::new();

    let record = |m: &Model,
                  d: &dyn WeightDelta,
                  desc: &Descriptor,
                  results: &mut Vec<EvalResult>|
     -> Result<(f64, f64)> {
        let mut sums = [0.0, 0.0];
        for (g, (group, tasks)) in [(Group::HeldIn, &held_in), (Group::HeldOut, &held_out)]
            .into_iter()
            .enumerate()
        {
            for t in tasks.iter() {
                let r = evaluate(m, d, t, group, desc, seed)?;
                sums[g] += r.value;
                results.push(r);
            }
        }
        Ok((
            sums[0] / held_in.len() as f64,
            sums[1] / held_out.len() as f64,
        ))
    };

    // Single-task experts.
    let fft: Vec<TaskVector> = held_in
        .iter()
        .map(|t| {
            dense
                .remove(t.id())
                .ok_or_else(|| Error::Input(format!("no gated expert for {}", t.id())))
        })
        .collect::<Result<_>>()?;
    let mut kr_values = vec![cfg.train.kr];
    kr_values.extend(
        cfg.kr_compare
            .iter()
            .copied()
            .filter(|k| *k != cfg.train.kr),
    );
    let mut sparse_by_kr = Vec::new();
    for &kr in &kr_values {
        let tc = TrainConfig {
            kr,
            ..cfg.train.clone()
        };
        sparse_by_kr.push(par_map(w, &held_in, |t| train_sparse(&model, t, &tc))?);
    }
    let loras = par_map(w, &held_in, |t| {
        train_lora(&model, t, cfg.lora_rank, cfg.lora_alpha, &cfg.train)
    })?;
    let multitask = train_multitask(&model, &held_in, &cfg.multitask)?;

    let mut single = Vec::new();
    for (kr, adapters) in kr_values.iter().zip(&sparse_by_kr) {
        let desc = Descriptor::new("sparse").kr(*kr);
        let mut s = 0.0;
        for (a, t) in adapters.iter().zip(&held_in) {
            let r = evaluate(&model, a, t, Group::HeldIn, &desc, seed)?;
            s += r.value;
            results.push(r);
        }
        single.push(MethodScore {
            method: sparse_label(*kr),
            held_in: s / held_in.len() as f64,
            held_out: f64::NAN,
        });
    }
    for (label, desc, deltas) in [
        (
            "dense",
            Descriptor::new("full").kr(1.0),
            fft.iter()
                .map(|v| v as &dyn WeightDelta)
                .collect::<Vec<_>>(),
        ),
        (
            "lora",
            Descriptor::new("lora").rank(cfg.lora_rank),
            loras.iter().map(|v| v as &dyn WeightDelta).collect(),
        ),
    ] {
        let mut s = 0.0;
        for (d, t) in deltas.iter().zip(&held_in) {
            let r = evaluate(&model, *d, t, Group::HeldIn, &desc, seed)?;
            s += r.value;
            results.push(r);
        }
        single.push(MethodScore {
            method: label.into(),
            held_in: s / held_in.len() as f64,
            held_out: f64::NAN,
        });
    }

    // Merged experts and the multitask reference.
    let sparse_experts: Vec<Expert> = sparse_by_kr[0]
        .iter()
        .cloned()
        .map(Expert::Sparse)
        .collect();
    let dense_experts: Vec<Expert> = fft.iter().cloned().map(Expert::Dense).collect();
    let lora_experts: Vec<Expert> = loras.iter().cloned().map(Expert::Lora).collect();
    let mut plan: Vec<(String, MergeSpec, &Vec<Expert>)> = vec![(
        "sparse-overlap".into(),
        MergeSpec::new(MergeMethod::SparseOverlap),
        &sparse_experts,
    )];
    for spec in &cfg.baselines {
        plan.push((format!("fft-{}", spec.method.name()), *spec, &dense_experts));
    }
    plan.push((
        "lora-average".into(),
        MergeSpec::new(MergeMethod::LoraAverage),
        &lora_experts,
    ));

    let mut merged_scores = Vec::new();
    let mut sparse_merged = None;
    for (name, spec, experts) in plan {
        let refs: Vec<&Expert> = experts.iter().collect();
        let m = merge(&spec, &refs)?;
        let desc = Descriptor::new(&name).merged(&spec);
        let (hi, ho) = record(&model, &m, &desc, &mut results)?;
        merged_scores.push(MethodScore {
            method: name,
            held_in: hi,
            held_out: ho,
        });
        if let (Merged::Sparse(a), None) = (&m, &sparse_merged) {
            sparse_merged = Some(a.clone());
        }
    }
    let (hi, ho) = record(
        &model,
        &multitask,
        &Descriptor::new("multitask"),
        &mut results,
    )?;
    merged_scores.push(MethodScore {
        method: "multitask".into(),
        held_in: hi,
        held_out: ho,
    });
    let base_scores = (
        mean_over(&held_in, |t| {
            accuracy(&model, &crate::model::NoDelta, &t.test)
        })?,
        mean_over(&held_out, |t| {
            accuracy(&model, &crate::model::NoDelta, &t.test)
        })?,
    );
    merged_scores.push(MethodScore {
        method: "base".into(),
        held_in: base_scores.0,
        held_out: base_scores.1,
    });

    let merged_adapter = sparse_merged.expect("sparse merge ran");
    let decomposition = interference_decomposition(
        &model,
        &merged_adapter,
        &sparse_by_kr[0].iter().collect::<Vec<_>>(),
        &held_in,
    )?;

    let pools = [
        ExpertPool {
            name: "sparse-overlap".into(),
            spec: MergeSpec::new(MergeMethod::SparseOverlap),
            experts: sparse_experts,
        },
        ExpertPool {
            name: "fft-uniform".into(),
            spec: MergeSpec::new(MergeMethod::Uniform),
            experts: dense_experts,
        },
    ];
    let grid: Vec<usize> = cfg
        .n_grid
        .iter()
        .copied()
        .filter(|&n| n <= held_in.len())
        .collect();
    let scaling = scaling_sweep(&model, &held_in, &pools, &grid, cfg.scaling_trials, seed)?;

    Ok(BundleReport {
        seed,
        gate_rejections,
        single,
        merged: merged_scores,
        decomposition,
        scaling,
        results,
    })
}
