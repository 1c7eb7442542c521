//! Training loops for sparse adapters, LoRA, dense deltas and multitask
//! runs.
//!
//! Sparse adapter training starts from `values = 0` and a full mask. During
//! the first epoch, every `mask_refresh_interval` optimizer steps the
//! gradient of the *unmasked* delta is taken on the current batch, entries
//! are rescored and the mask is rebuilt. From the second epoch on the mask
//! is frozen and only masked coordinates are updated. Values outside the
//! final mask are zeroed when training ends.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::merging::{Merged, TaskVector};
use crate::model::{
    loss, loss_and_grads, LayerDelta, LoraAdapter, Model, ParamId, Site, WeightDelta,
};
use crate::numerics::{Matrix, Rng};
use crate::saliency::{
    block_mask, keep_count, layer_drop, score, top_indices, topk_mask, Criterion, MaskKind,
    ScoreField, ScoreKind, SparseMask,
};
use crate::taskgen::{batch, Dataset, Example};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Input(format!("unknown optimizer {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Fraction of each adapted layer kept trainable, in `(0, 1]`.
    pub kr: f64,
    pub epochs: usize,
    /// Optimizer steps between mask refreshes in the first epoch.
    pub mask_refresh_interval: usize,
    /// Upper bound on refreshes; `Some(1)` selects the mask once
    /// (single-shot), `None` refreshes throughout the first epoch.
    pub max_mask_refreshes: Option<usize>,
    pub criterion: Criterion,
    /// Block edge for block-sparse masks; element masks when `None`.
    pub block_size: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub layer_drop: bool,
    pub batch_size: usize,
    /// Stop once validation loss fails to improve for an epoch, and keep
    /// the best epoch's state.
    pub early_stopping: bool,
    /// Share of the mask regrown by gradient magnitude under grow-and-drop.
    pub gd_regrow_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kr: 0.1,
            epochs: 5,
            mask_refresh_interval: 100,
            max_mask_refreshes: None,
            criterion: Criterion::Mcs,
            block_size: None,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            layer_drop: false,
            batch_size: 16,
            early_stopping: true,
            gd_regrow_fraction: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kr > 0.0 && self.kr <= 1.0) {
            return Err(Error::Input(format!(
                "kr must lie in (0, 1], got {}",
                self.kr
            )));
        }
        if self.batch_size == 0 || self.mask_refresh_interval == 0 {
            return Err(Error::Input(
                "batch size and refresh interval must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input("learning rate must be positive".into()));
        }
        if self.block_size == Some(0) {
            return Err(Error::Input("block size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gd_regrow_fraction) {
            return Err(Error::Input(
                "grow-and-drop regrow fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    /// Dense trainable values; zero outside `mask` once training finishes.
    pub values: Matrix,
    pub mask: SparseMask,
}

/// A trained sparse update `values ∘ mask` per adapted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub task_id: String,
    pub layers: BTreeMap<Site, AdapterLayer>,
    pub config: TrainConfig,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl Adapter {
    /// Zero values on every adapted site of `model` with a full mask.
    pub fn fresh(model: &Model, config: &TrainConfig, task_id: &str) -> Self {
        let cfg = model.config();
        let layers = cfg
            .adapted_sites()
            .into_iter()
            .map(|s| {
                let (r, c) = cfg.site_shape(s);
                (
                    s,
                    AdapterLayer {
                        values: Matrix::zeros(r, c),
                        mask: SparseMask::full(r, c),
                    },
                )
            })
            .collect();
        Self {
            task_id: task_id.to_string(),
            layers,
            config: config.clone(),
            train_loss: f64::NAN,
            val_loss: f64::NAN,
        }
    }

    /// Sets every value outside its layer's mask to zero.
    pub fn zero_outside_masks(&mut self) {
        for layer in self.layers.values_mut() {
            let keep = layer.mask.to_dense();
            for (v, m) in layer.values.data_mut().iter_mut().zip(keep.data()) {
                if *m == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.values().map(|l| l.mask.len()).sum()
    }

    /// The same values with masks ignored (`W + values`).
    pub fn unmasked(&self) -> Unmasked<'_> {
        Unmasked(self)
    }

    /// Layers with a non-empty mask.
    pub fn active_sites(&self) -> Vec<Site> {
        self.layers
            .iter()
            .filter(|(_, l)| !l.mask.is_empty())
            .map(|(s, _)| *s)
            .collect()
    }
}

impl WeightDelta for Adapter {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
        self.layers
            .iter()
            .map(|(s, l)| {
                (
                    *s,
                    LayerDelta::Sparse {
                        values: &l.values,
                        mask: Some(&l.mask),
                    },
                )
            })
            .collect()
    }
}

pub struct Unmasked<'a>(&'a Adapter);

impl WeightDelta for Unmasked<'_> {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
        self.0
            .layers
            .iter()
            .map(|(s, l)| {
                (
                    *s,
                    LayerDelta::Sparse {
                        values: &l.values,
                        mask: None,
                    },
                )
            })
            .collect()
    }
}

/// One optimizer update, reported to a [`TrainObserver`].
pub struct UpdateEvent<'a> {
    pub epoch: usize,
    pub global_step: usize,
    pub param: ParamId,
    /// Coordinates whose value changed in this step.
    pub touched: &'a [(u32, u32)],
    /// Coordinates the optimizer was allowed to update, if restricted.
    pub allowed: Option<&'a SparseMask>,
    /// The parameter after the update.
    pub values: &'a Matrix,
}

/// Hooks for instrumenting training runs.
pub trait TrainObserver {
    fn on_update(&mut self, _event: &UpdateEvent<'_>) {}
    fn on_mask_refresh(&mut self, _global_step: usize, _adapter: &Adapter) {}
    fn on_epoch_end(&mut self, _epoch: usize, _train_loss: f64, _val_loss: f64) {}
}

struct Silent;
impl TrainObserver for Silent {}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: usize,
    moments: HashMap<ParamId, (Matrix, Matrix)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            moments: HashMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates `value` from `grad`, restricted to `allowed` when given.
    /// Moments of coordinates outside `allowed` are left as they were.
    fn update(
        &mut self,
        id: ParamId,
        value: &mut Matrix,
        grad: &Matrix,
        allowed: Option<&SparseMask>,
        mut touched: Option<&mut Vec<(u32, u32)>>,
    ) {
        let cols = value.cols();
        let (kind, lr, t) = (self.kind, self.lr, self.t as i32);
        let (m, v) = self.moments.entry(id).or_insert_with(|| {
            (
                Matrix::zeros(value.rows(), cols),
                Matrix::zeros(value.rows(), cols),
            )
        });
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let mut apply = |i: usize| {
            let g = grad.data()[i];
            let step = match kind {
                OptimizerKind::Sgd => lr * g,
                OptimizerKind::Adam => {
                    let mi = &mut m.data_mut()[i];
                    *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                    let mhat = *mi / bc1;
                    let vi = &mut v.data_mut()[i];
                    *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                    let vhat = *vi / bc2;
                    lr * mhat / (vhat.sqrt() + ADAM_EPS)
                }
            };
            if step != 0.0 {
                value.data_mut()[i] -= step;
                if let Some(t) = touched.as_deref_mut() {
                    t.push(((i / cols) as u32, (i % cols) as u32));
                }
            }
        };
        match allowed {
            Some(mask) => {
                for (r, c) in mask.entries() {
                    apply(r * cols + c);
                }
            }
            None => (0..grad.len()).for_each(apply),
        }
    }
}

/// Mean loss over `examples`, evaluated in chunks.
pub fn dataset_loss(model: &Model, delta: &dyn WeightDelta, examples: &[Example]) -> Result<f64> {
    let seq = model.config().seq_len;
    let mut total = 0.0;
    for chunk in examples.chunks(256) {
        total += loss(model, delta, &batch(chunk, seq))? * chunk.len() as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// State the generic loop optimizes.
trait Trainable: Clone + WeightDelta {
    fn params(&self) -> Vec<ParamId>;
    fn value_mut(&mut self, id: ParamId) -> &mut Matrix;
    fn allowed(&self, _id: ParamId) -> Option<&SparseMask> {
        None
    }
}

impl Trainable for Adapter {
    fn params(&self) -> Vec<ParamId> {
        self.active_sites()
            .into_iter()
            .map(ParamId::Delta)
            .collect()
    }

    fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        let ParamId::Delta(s) = id else {
            unreachable!()
        };
        &mut self.layers.get_mut(&s).expect("adapter site").values
    }

    fn allowed(&self, id: ParamId) -> Option<&SparseMask> {
        let ParamId::Delta(s) = id else {
            unreachable!()
        };
        Some(&self.layers[&s].mask)
    }
}

impl Trainable for LoraAdapter {
    fn params(&self) -> Vec<ParamId> {
        self.layers
            .keys()
            .flat_map(|s| [ParamId::LoraA(*s), ParamId::LoraB(*s)])
            .collect()
    }

    fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        match id {
            ParamId::LoraA(s) => &mut self.layers.get_mut(&s).expect("lora site").a,
            ParamId::LoraB(s) => &mut self.layers.get_mut(&s).expect("lora site").b,
            _ => unreachable!(),
        }
    }
}

impl Trainable for TaskVector {
    fn params(&self) -> Vec<ParamId> {
        self.layers.keys().map(|s| ParamId::Delta(*s)).collect()
    }

    fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        let ParamId::Delta(s) = id else {
            unreachable!()
        };
        self.layers.get_mut(&s).expect("task vector site")
    }
}

struct StepCtx<'a> {
    epoch: usize,
    step_in_epoch: usize,
    global_step: usize,
    batch: &'a crate::model::Batch,
}

#[derive(Clone, Copy, Debug)]
struct FitSummary {
    train_loss: f64,
    val_loss: f64,
}

/// Minibatch training with optional early stopping on validation loss.
fn fit<T: Trainable>(
    model: &Model,
    state: &mut T,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
    mut after_step: impl FnMut(&mut T, &StepCtx<'_>, &mut dyn TrainObserver) -> Result<()>,
) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    let seq = model.config().seq_len;
    let mut rng = Rng::new(cfg.seed).fork(7);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0;
    let mut best: Option<(f64, T, f64)> = None;
    let mut last = FitSummary {
        train_loss: f64::NAN,
        val_loss: f64::NAN,
    };
    let mut touched = Vec::new();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for (step_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            global_step += 1;
            let b = batch(chunk.iter().map(|&i| &train[i]), seq);
            let params = state.params();
            let (l, grads) = match loss_and_grads(model, &*state, &b, &params) {
                Ok(x) => x,
                Err(e) if e.is_numeric() => {
                    return Err(Error::Training {
                        step: global_step,
                        reason: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            };
            epoch_loss += l * b.len() as f64;
            seen += b.len();
            opt.begin_step();
            for id in params {
                let allowed = state.allowed(id).cloned();
                touched.clear();
                let value = state.value_mut(id);
                opt.update(id, value, &grads[&id], allowed.as_ref(), Some(&mut touched));
                observer.on_update(&UpdateEvent {
                    epoch,
                    global_step,
                    param: id,
                    touched: &touched,
                    allowed: allowed.as_ref(),
                    values: value,
                });
            }
            let ctx = StepCtx {
                epoch,
                step_in_epoch: step_idx + 1,
                global_step,
                batch: &b,
            };
            after_step(state, &ctx, observer)?;
        }
        let train_loss = epoch_loss / seen as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            dataset_loss(model, &*state, val)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Training {
                step: global_step,
                reason: "validation loss is not finite".into(),
            });
        }
        observer.on_epoch_end(epoch, train_loss, val_loss);
        last = FitSummary {
            train_loss,
            val_loss,
        };
        if cfg.early_stopping {
            match &best {
                Some((best_val, _, _)) if val_loss >= *best_val => break,
                _ => best = Some((val_loss, state.clone(), train_loss)),
            }
        }
    }
    if let Some((val_loss, snapshot, train_loss)) = best {
        *state = snapshot;
        last = FitSummary {
            train_loss,
            val_loss,
        };
    }
    Ok(last)
}

fn primary_score_kind(c: Criterion) -> ScoreKind {
    match c {
        Criterion::Mcs => ScoreKind::Mcs,
        Criterion::Cs => ScoreKind::Cs,
        Criterion::Gm => ScoreKind::Gm,
        Criterion::Wm => ScoreKind::Wm,
        Criterion::Gd => ScoreKind::GdGrow,
    }
}

/// Rebuilds one layer's mask from fresh dense gradients.
fn rebuild_mask(cfg: &TrainConfig, layer: &AdapterLayer, grads: &Matrix) -> Result<SparseMask> {
    let values = &layer.values;
    if cfg.criterion != Criterion::Gd {
        let field = score(primary_score_kind(cfg.criterion), values, grads, None)?;
        return match cfg.block_size {
            Some(b) => block_mask(&field, cfg.kr, b),
            None => topk_mask(&field, cfg.kr),
        };
    }
    // Grow-and-drop: keep the strongest current units by distance from the
    // zero initialization, then regrow the rest by gradient magnitude.
    let init = Matrix::zeros(values.rows(), values.cols());
    let drop = score(ScoreKind::GdDrop, values, grads, Some(&init))?;
    let grow = score(ScoreKind::GdGrow, values, grads, None)?;
    let (rows, cols) = values.shape();
    match cfg.block_size {
        None => {
            let k = keep_count(cfg.kr, rows * cols).max(1);
            let current: Vec<bool> = {
                let d = layer.mask.to_dense();
                d.data().iter().map(|&m| m != 0.0).collect()
            };
            let units = grow_and_drop(
                drop.scores.data(),
                grow.scores.data(),
                &current,
                k,
                cfg.gd_regrow_fraction,
            );
            let coords = units
                .into_iter()
                .map(|i| ((i / cols) as u32, (i % cols) as u32))
                .collect();
            SparseMask::from_elements(rows, cols, coords)
        }
        Some(b) => {
            // Reuse the block machinery for validation and the block count.
            let nb = match block_mask(&grow, cfg.kr, b)?.kind() {
                MaskKind::Block { blocks, .. } => blocks.len(),
                MaskKind::Element(_) => unreachable!(),
            };
            let bc = cols / b;
            let sums = |f: &ScoreField| {
                let mut s = vec![0.0; (rows / b) * bc];
                for r in 0..rows {
                    for c in 0..cols {
                        s[(r / b) * bc + c / b] += f.scores.get(r, c);
                    }
                }
                s
            };
            let current: Vec<bool> = (0..(rows / b) * bc)
                .map(|i| layer.mask.contains((i / bc) * b, (i % bc) * b))
                .collect();
            let units = grow_and_drop(
                &sums(&drop),
                &sums(&grow),
                &current,
                nb,
                cfg.gd_regrow_fraction,
            );
            let blocks = units
                .into_iter()
                .map(|i| ((i / bc) as u32, (i % bc) as u32))
                .collect();
            SparseMask::from_blocks(rows, cols, b, blocks)
        }
    }
}

/// Keeps `k - regrow` current units with the highest drop score, then adds
/// the `regrow` best remaining units by grow score. Returns sorted indices.
fn grow_and_drop(
    drop: &[f64],
    grow: &[f64],
    current: &[bool],
    k: usize,
    regrow_fraction: f64,
) -> Vec<usize> {
    let regrow = (regrow_fraction * k as f64).floor() as usize;
    let keep_n = k - regrow;
    let cur_idx: Vec<usize> = (0..drop.len()).filter(|&i| current[i]).collect();
    let cur_scores: Vec<f64> = cur_idx.iter().map(|&i| drop[i]).collect();
    let mut chosen: Vec<usize> = top_indices(&cur_scores, keep_n.min(cur_idx.len()))
        .into_iter()
        .map(|j| cur_idx[j])
        .collect();
    let mut taken = vec![false; drop.len()];
    chosen.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..drop.len()).filter(|&i| !taken[i]).collect();
    let rest_scores: Vec<f64> = rest.iter().map(|&i| grow[i]).collect();
    let need = k - chosen.len();
    chosen.extend(
        top_indices(&rest_scores, need.min(rest.len()))
            .into_iter()
            .map(|j| rest[j]),
    );
    chosen.sort_unstable();
    chosen
}

/// Sparse adapter training with periodic mask refresh in the first epoch.
pub fn train_sparse(model: &Model, task: &Dataset, config: &TrainConfig) -> Result<Adapter> {
    train_sparse_observed(model, task, config, &mut Silent)
}

pub fn train_sparse_observed(
    model: &Model,
    task: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Adapter> {
    config.validate()?;
    if model.config().adapt_targets.is_empty() {
        return Err(Error::Input("no adapt targets configured".into()));
    }
    let mut adapter = Adapter::fresh(model, config, task.id());
    let mut refreshes = 0;
    let summary = fit(
        model,
        &mut adapter,
        &task.train,
        &task.val,
        config,
        observer,
        |adapter, ctx, observer| {
            if ctx.epoch != 1
                || ctx.step_in_epoch % config.mask_refresh_interval != 0
                || config.max_mask_refreshes.is_some_and(|m| refreshes >= m)
            {
                return Ok(());
            }
            refresh_masks(model, adapter, ctx, config)?;
            refreshes += 1;
            observer.on_mask_refresh(ctx.global_step, adapter);
            Ok(())
        },
    )?;
    adapter.zero_outside_masks();
    adapter.train_loss = summary.train_loss;
    adapter.val_loss = summary.val_loss;
    Ok(adapter)
}

fn refresh_masks(
    model: &Model,
    adapter: &mut Adapter,
    ctx: &StepCtx<'_>,
    cfg: &TrainConfig,
) -> Result<()> {
    let sites = adapter.active_sites();
    let params: Vec<ParamId> = sites.iter().map(|s| ParamId::Delta(*s)).collect();
    let (_, grads) =
        loss_and_grads(model, &adapter.unmasked(), ctx.batch, &params).map_err(|e| {
            if e.is_numeric() {
                Error::Training {
                    step: ctx.global_step,
                    reason: e.to_string(),
                }
            } else {
                e
            }
        })?;
    let mut keep = vec![true; sites.len()];
    if cfg.layer_drop {
        let fields: Vec<ScoreField> = sites
            .iter()
            .map(|s| {
                score(
                    primary_score_kind(cfg.criterion),
                    &adapter.layers[s].values,
                    &grads[&ParamId::Delta(*s)],
                    None,
                )
            })
            .collect::<Result<_>>()?;
        keep = layer_drop(&fields, cfg.kr)?.active;
    }
    for (site, active) in sites.iter().zip(keep) {
        let layer = adapter.layers.get_mut(site).expect("adapter site");
        layer.mask = if active {
            rebuild_mask(cfg, layer, &grads[&ParamId::Delta(*site)])?
        } else {
            let (r, c) = layer.values.shape();
            SparseMask::empty(r, c)
        };
    }
    Ok(())
}

/// Trains a LoRA adapter on the model's adapted layers.
pub fn train_lora(
    model: &Model,
    task: &Dataset,
    rank: usize,
    alpha: f64,
    config: &TrainConfig,
) -> Result<LoraAdapter> {
    config.validate()?;
    let mut rng = Rng::new(config.seed).fork(11);
    let mut lora = LoraAdapter::init(model, rank, alpha, &mut rng)?;
    lora.task_id = task.id().to_string();
    fit(
        model,
        &mut lora,
        &task.train,
        &task.val,
        config,
        &mut Silent,
        |_, _, _| Ok(()),
    )?;
    Ok(lora)
}

fn dense_fit(
    model: &Model,
    sites: &[Site],
    id: &str,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TaskVector> {
    config.validate()?;
    let mut tv = TaskVector::zeros(model, sites, id);
    fit(model, &mut tv, train, val, config, observer, |_, _, _| {
        Ok(())
    })?;
    Ok(tv)
}

/// Dense training of the adapted layers; returns `W_finetuned - W`.
pub fn train_full(model: &Model, task: &Dataset, config: &TrainConfig) -> Result<TaskVector> {
    train_full_observed(model, task, config, &mut Silent)
}

pub fn train_full_observed(
    model: &Model,
    task: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TaskVector> {
    let sites = model.config().adapted_sites();
    dense_fit(
        model,
        &sites,
        task.id(),
        &task.train,
        &task.val,
        config,
        observer,
    )
}

/// Shuffled union of the tasks' splits.
pub fn union_splits(tasks: &[&Dataset], seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if tasks.is_empty() {
        return Err(Error::Input(
            "multitask training needs at least one task".into(),
        ));
    }
    let mut train: Vec<Example> = tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let val: Vec<Example> = tasks.iter().flat_map(|t| t.val.iter().cloned()).collect();
    Rng::new(seed).fork(13).shuffle(&mut train);
    Ok((train, val))
}

/// One dense model trained on the union of all tasks.
pub fn train_multitask(
    model: &Model,
    tasks: &[&Dataset],
    config: &TrainConfig,
) -> Result<TaskVector> {
    let (train, val) = union_splits(tasks, config.seed)?;
    let sites = model.config().adapted_sites();
    dense_fit(
        model,
        &sites,
        "multitask",
        &train,
        &val,
        config,
        &mut Silent,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecycleMode {
    /// Train only the merged adapter's union-mask coordinates.
    SparseOnly,
    /// Fold the merged delta into `W` and train every weight.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recycled {
    Sparse(Adapter),
    Full(Model),
}

impl Recycled {
    /// Base model and delta to evaluate the recycled state with.
    pub fn parts<'a>(&'a self, base: &'a Model) -> (&'a Model, &'a dyn WeightDelta) {
        match self {
            Recycled::Sparse(a) => (base, a),
            Recycled::Full(m) => (m, &crate::model::NoDelta),
        }
    }
}

/// Second-stage multitask training that starts from a merged expert.
pub fn recycle_finetune(
    model: &Model,
    merged: &Merged,
    tasks: &[&Dataset],
    mode: RecycleMode,
    epochs: usize,
    config: &TrainConfig,
) -> Result<Recycled> {
    config.validate()?;
    let cfg = TrainConfig {
        epochs,
        ..config.clone()
    };
    let (train, val) = union_splits(tasks, config.seed)?;
    match mode {
        RecycleMode::SparseOnly => {
            let Merged::Sparse(adapter) = merged else {
                return Err(Error::Input(
                    "sparse-only recycling needs a sparse merged adapter".into(),
                ));
            };
            let mut adapter = adapter.clone();
            if epochs > 0 {
                let summary = fit(
                    model,
                    &mut adapter,
                    &train,
                    &val,
                    &cfg,
                    &mut Silent,
                    |_, _, _| Ok(()),
                )?;
                adapter.train_loss = summary.train_loss;
                adapter.val_loss = summary.val_loss;
            }
            Ok(Recycled::Sparse(adapter))
        }
        RecycleMode::Full => {
            let folded = model.fold(merged)?;
            if epochs == 0 {
                return Ok(Recycled::Full(folded));
            }
            let sites = folded.config().all_sites();
            let tv = dense_fit(&folded, &sites, "recycled", &train, &val, &cfg, &mut Silent)?;
            Ok(Recycled::Full(folded.fold(&tv)?))
        }
    }
}
