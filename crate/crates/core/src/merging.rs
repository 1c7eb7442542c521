//! Combining several experts into one update.
//!
//! Sparse adapters merge by overlap-weighted averaging: each coordinate's
//! summed delta is divided by the number of adapters whose mask selects it
//! (at least one). Dense baselines operate on task vectors: uniform
//! averaging, LoRA averaging, task arithmetic, TIES and Breadcrumbs.
//!
//! Per-coordinate reductions are computed exactly and rounded once, so
//! every merge is independent of input order and simple identities (mean
//! of identical inputs, disjoint supports) hold bitwise.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{LayerDelta, LoraAdapter, Model, Site, WeightDelta};
use crate::numerics::{exact_quotient, exact_sum, Matrix};
use crate::saliency::{keep_count, top_indices, SparseMask};
use crate::trainer::{Adapter, AdapterLayer};

/// Dense per-layer delta `W_finetuned - W` for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub task_id: String,
    pub layers: BTreeMap<Site, Matrix>,
}

impl TaskVector {
    pub fn zeros(model: &Model, sites: &[Site], task_id: &str) -> Self {
        let cfg = model.config();
        let layers = sites
            .iter()
            .map(|s| {
                let (r, c) = cfg.site_shape(*s);
                (*s, Matrix::zeros(r, c))
            })
            .collect();
        Self {
            task_id: task_id.to_string(),
            layers,
        }
    }

    /// `values ∘ mask` per layer.
    pub fn from_adapter(adapter: &Adapter) -> Self {
        let layers = adapter
            .layers
            .iter()
            .map(|(s, l)| {
                let keep = l.mask.to_dense();
                (
                    *s,
                    l.values
                        .zip_map(&keep, |v, m| if m != 0.0 { v } else { 0.0 }),
                )
            })
            .collect();
        Self {
            task_id: adapter.task_id.clone(),
            layers,
        }
    }

    /// The low-rank product per layer.
    pub fn from_lora(lora: &LoraAdapter) -> Result<Self> {
        let layers = lora
            .layers
            .keys()
            .map(|s| Ok((*s, lora.layer_delta(*s)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            task_id: lora.task_id.clone(),
            layers,
        })
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .values()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl WeightDelta for TaskVector {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
        self.layers
            .iter()
            .map(|(s, m)| (*s, LayerDelta::Dense(m)))
            .collect()
    }
}

/// One trained expert, in whichever form its training produced.
#[derive(Clone, Debug, PartialEq)]
pub enum Expert {
    Sparse(Adapter),
    Dense(TaskVector),
    Lora(LoraAdapter),
}

impl Expert {
    pub fn task_id(&self) -> &str {
        match self {
            Expert::Sparse(a) => &a.task_id,
            Expert::Dense(t) => &t.task_id,
            Expert::Lora(l) => &l.task_id,
        }
    }

    pub fn to_task_vector(&self) -> Result<TaskVector> {
        match self {
            Expert::Sparse(a) => Ok(TaskVector::from_adapter(a)),
            Expert::Dense(t) => Ok(t.clone()),
            Expert::Lora(l) => TaskVector::from_lora(l),
        }
    }
}

/// What a merge produced: a sparse adapter or a dense task vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Merged {
    Sparse(Adapter),
    Dense(TaskVector),
}

impl Merged {
    pub fn to_task_vector(&self) -> TaskVector {
        match self {
            Merged::Sparse(a) => TaskVector::from_adapter(a),
            Merged::Dense(t) => t.clone(),
        }
    }
}

impl WeightDelta for Merged {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
        match self {
            Merged::Sparse(a) => a.layer_deltas(),
            Merged::Dense(t) => t.layer_deltas(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MergeMethod {
    SparseOverlap,
    Uniform,
    LoraAverage,
    TaskArithmetic,
    Ties,
    Breadcrumbs,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 6] = [
        MergeMethod::SparseOverlap,
        MergeMethod::Uniform,
        MergeMethod::LoraAverage,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::Breadcrumbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::SparseOverlap => "sparse-overlap",
            MergeMethod::Uniform => "uniform",
            MergeMethod::LoraAverage => "lora-average",
            MergeMethod::TaskArithmetic => "task-arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Breadcrumbs => "breadcrumbs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown merge method {s:?}")))
    }

    /// Default scale for the methods that take one.
    pub fn default_lambda(self) -> f64 {
        match self {
            MergeMethod::TaskArithmetic | MergeMethod::Breadcrumbs => 0.4,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub lambda: f64,
    pub ties_trim_fraction: f64,
    pub breadcrumbs_top: f64,
    pub breadcrumbs_bottom: f64,
}

impl MergeSpec {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            lambda: method.default_lambda(),
            ties_trim_fraction: 0.2,
            breadcrumbs_top: 0.01,
            breadcrumbs_bottom: 0.85,
        }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Input(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.ties_trim_fraction > 0.0 && self.ties_trim_fraction <= 1.0) {
            return Err(Error::Input("ties trim fraction must lie in (0, 1]".into()));
        }
        check_percentiles(self.breadcrumbs_top, self.breadcrumbs_bottom)
    }
}

fn check_percentiles(top: f64, bottom: f64) -> Result<()> {
    if !(top >= 0.0 && bottom >= 0.0 && top + bottom < 1.0) {
        return Err(Error::Input(format!(
            "breadcrumbs percentiles must be non-negative with sum below 1, got {top} + {bottom}"
        )));
    }
    Ok(())
}

/// Per-coordinate count of selecting masks, floored at one.
pub fn overlap_factor(masks: &[&SparseMask]) -> Result<Matrix> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Input("overlap factor of no masks".into()))?;
    let (rows, cols) = first.shape();
    let mut counts = Matrix::zeros(rows, cols);
    for m in masks {
        if m.shape() != (rows, cols) {
            return Err(Error::Dimension(format!(
                "mask shapes differ: {rows}x{cols} vs {}x{}",
                m.shape().0,
                m.shape().1
            )));
        }
        for (r, c) in m.entries() {
            counts.data_mut()[r * cols + c] += 1.0;
        }
    }
    Ok(counts.map(|v| v.max(1.0)))
}

type SiteShapes = Vec<(Site, (usize, usize))>;

fn check_sites<'a>(items: impl IntoIterator<Item = (&'a str, SiteShapes)>) -> Result<SiteShapes> {
    let mut reference: Option<(String, SiteShapes)> = None;
    for (id, sites) in items {
        match &reference {
            None => reference = Some((id.to_string(), sites)),
            Some((first, r)) if *r != sites => {
                return Err(Error::Input(format!(
                    "experts {first:?} and {id:?} cover different layers or shapes"
                )))
            }
            _ => {}
        }
    }
    reference
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Input("nothing to merge".into()))
}

fn adapter_sites(a: &Adapter) -> SiteShapes {
    a.layers
        .iter()
        .map(|(s, l)| (*s, l.values.shape()))
        .collect()
}

fn vector_sites(t: &TaskVector) -> SiteShapes {
    t.layers.iter().map(|(s, m)| (*s, m.shape())).collect()
}

/// Overlap-weighted average of sparse adapters; the mask is the union.
pub fn merge_sparse(adapters: &[&Adapter]) -> Result<Adapter> {
    let sites = check_sites(
        adapters
            .iter()
            .map(|a| (a.task_id.as_str(), adapter_sites(a))),
    )?;
    let mut layers = BTreeMap::new();
    let mut selected = Vec::with_capacity(adapters.len());
    for (site, (rows, cols)) in sites {
        let masks: Vec<&SparseMask> = adapters.iter().map(|a| &a.layers[&site].mask).collect();
        let dense: Vec<Matrix> = masks.iter().map(|m| m.to_dense()).collect();
        let union = SparseMask::union(&masks)?;
        let mut values = Matrix::zeros(rows, cols);
        for (r, c) in union.entries() {
            let i = r * cols + c;
            selected.clear();
            for (a, keep) in adapters.iter().zip(&dense) {
                if keep.data()[i] != 0.0 {
                    selected.push(a.layers[&site].values.data()[i]);
                }
            }
            values.data_mut()[i] = exact_quotient(&selected, selected.len() as u32);
        }
        layers.insert(
            site,
            AdapterLayer {
                values,
                mask: union,
            },
        );
    }
    let first = adapters[0];
    Ok(Adapter {
        task_id: merged_id(adapters.iter().map(|a| a.task_id.as_str())),
        layers,
        config: first.config.clone(),
        train_loss: f64::NAN,
        val_loss: f64::NAN,
    })
}

fn merged_id<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.collect();
    ids.sort_unstable();
    format!("merged[{}]", ids.join("+"))
}

/// Applies `f` to the per-coordinate list of input values on every layer.
fn coordinatewise(vectors: &[&TaskVector], mut f: impl FnMut(&[f64]) -> f64) -> Result<TaskVector> {
    let sites = check_sites(
        vectors
            .iter()
            .map(|t| (t.task_id.as_str(), vector_sites(t))),
    )?;
    let mut column = Vec::with_capacity(vectors.len());
    let mut layers = BTreeMap::new();
    for (site, (rows, cols)) in sites {
        let inputs: Vec<&[f64]> = vectors.iter().map(|t| t.layers[&site].data()).collect();
        let mut out = Matrix::zeros(rows, cols);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(inputs.iter().map(|d| d[i]));
            *o = f(&column);
        }
        layers.insert(site, out);
    }
    Ok(TaskVector {
        task_id: merged_id(vectors.iter().map(|t| t.task_id.as_str())),
        layers,
    })
}

/// `λ Σ τ_n`.
pub fn task_arithmetic(vectors: &[&TaskVector], lambda: f64) -> Result<TaskVector> {
    coordinatewise(vectors, |xs| lambda * exact_sum(xs))
}

/// Plain mean; identical to task arithmetic with `λ = 1/N`.
pub fn merge_uniform(vectors: &[&TaskVector]) -> Result<TaskVector> {
    task_arithmetic(vectors, 1.0 / vectors.len().max(1) as f64)
}

/// Mean of the LoRA products.
pub fn merge_lora(loras: &[&LoraAdapter]) -> Result<TaskVector> {
    let vectors = loras
        .iter()
        .map(|l| TaskVector::from_lora(l))
        .collect::<Result<Vec<_>>>()?;
    merge_uniform(&vectors.iter().collect::<Vec<_>>())
}

/// Keeps the `fraction` largest-magnitude entries of `values`; ties go to
/// the lower index.
fn trim_to_top(values: &[f64], fraction: f64) -> Vec<f64> {
    let k = keep_count(fraction, values.len()).max(1).min(values.len());
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mut out = vec![0.0; values.len()];
    for i in top_indices(&mags, k) {
        out[i] = values[i];
    }
    out
}

/// Trim, elect a sign per coordinate, average the agreeing entries and
/// scale by `λ`.
pub fn ties(vectors: &[&TaskVector], lambda: f64, trim_fraction: f64) -> Result<TaskVector> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(Error::Input("ties trim fraction must lie in (0, 1]".into()));
    }
    let trimmed: Vec<TaskVector> = vectors
        .iter()
        .map(|t| TaskVector {
            task_id: t.task_id.clone(),
            layers: t
                .layers
                .iter()
                .map(|(s, m)| {
                    let kept = trim_to_top(m.data(), trim_fraction);
                    (
                        *s,
                        Matrix::from_vec(m.rows(), m.cols(), kept).expect("same shape"),
                    )
                })
                .collect(),
        })
        .collect();
    let refs: Vec<&TaskVector> = trimmed.iter().collect();
    let mut agreeing = Vec::new();
    coordinatewise(&refs, |xs| {
        let total = exact_sum(xs);
        let positive = total >= 0.0;
        agreeing.clear();
        agreeing.extend(
            xs.iter()
                .copied()
                .filter(|&x| x != 0.0 && (x > 0.0) == positive),
        );
        if agreeing.is_empty() {
            return 0.0;
        }
        lambda * exact_quotient(&agreeing, agreeing.len() as u32)
    })
}

/// Zeroes the `top` largest and `bottom` smallest magnitude fractions of
/// `values`.
fn breadcrumb_mask(values: &[f64], top: f64, bottom: f64) -> Vec<f64> {
    let n = values.len();
    let n_top = keep_count(top, n);
    let n_bottom = keep_count(bottom, n);
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut out = values.to_vec();
    for &i in &by_mag[..n_bottom] {
        out[i] = 0.0;
    }
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    for i in top_indices(&mags, n_top) {
        out[i] = 0.0;
    }
    out
}

/// Drops outliers and negligible entries per layer, sums the survivors and
/// scales by `λ`.
pub fn breadcrumbs(
    vectors: &[&TaskVector],
    lambda: f64,
    top: f64,
    bottom: f64,
) -> Result<TaskVector> {
    check_percentiles(top, bottom)?;
    let masked: Vec<TaskVector> = vectors
        .iter()
        .map(|t| TaskVector {
            task_id: t.task_id.clone(),
            layers: t
                .layers
                .iter()
                .map(|(s, m)| {
                    let kept = breadcrumb_mask(m.data(), top, bottom);
                    (
                        *s,
                        Matrix::from_vec(m.rows(), m.cols(), kept).expect("same shape"),
                    )
                })
                .collect(),
        })
        .collect();
    task_arithmetic(&masked.iter().collect::<Vec<_>>(), lambda)
}

/// Dispatches on `spec.method`.
pub fn merge(spec: &MergeSpec, experts: &[&Expert]) -> Result<Merged> {
    spec.validate()?;
    if experts.is_empty() {
        return Err(Error::Input("nothing to merge".into()));
    }
    match spec.method {
        MergeMethod::SparseOverlap => {
            let adapters = experts
                .iter()
                .map(|e| match e {
                    Expert::Sparse(a) => Ok(a),
                    other => Err(Error::Input(format!(
                        "sparse-overlap merging needs sparse adapters, {:?} is not one",
                        other.task_id()
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Merged::Sparse(merge_sparse(&adapters)?))
        }
        MergeMethod::LoraAverage => {
            let loras = experts
                .iter()
                .map(|e| match e {
                    Expert::Lora(l) => Ok(l),
                    other => Err(Error::Input(format!(
                        "lora averaging needs lora adapters, {:?} is not one",
                        other.task_id()
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Merged::Dense(merge_lora(&loras)?))
        }
        method => {
            let vectors = experts
                .iter()
                .map(|e| e.to_task_vector())
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TaskVector> = vectors.iter().collect();
            let out = match method {
                MergeMethod::Uniform => merge_uniform(&refs)?,
                MergeMethod::TaskArithmetic => task_arithmetic(&refs, spec.lambda)?,
                MergeMethod::Ties => ties(&refs, spec.lambda, spec.ties_trim_fraction)?,
                MergeMethod::Breadcrumbs => breadcrumbs(
                    &refs,
                    spec.lambda,
                    spec.breadcrumbs_top,
                    spec.breadcrumbs_bottom,
                )?,
                _ => unreachable!(),
            };
            Ok(Merged::Dense(out))
        }
    }
}

/// A base model with a merged delta added on top; the base is borrowed and
/// never modified.
pub struct MergedModel<'a> {
    pub base: &'a Model,
    pub delta: &'a Merged,
}

/// Checks shapes and pairs the base with the merged delta.
pub fn apply_merge<'a>(base: &'a Model, merged: &'a Merged) -> Result<MergedModel<'a>> {
    for (site, delta) in merged.layer_deltas() {
        let w = base.weight(site)?;
        let shape = match delta {
            LayerDelta::Sparse { values, .. } | LayerDelta::Dense(values) => values.shape(),
            LayerDelta::LowRank { a, b, .. } => (a.rows(), b.cols()),
        };
        if shape != w.shape() {
            return Err(Error::Dimension(format!(
                "merged delta for {site} is {}x{}, weight is {}x{}",
                shape.0,
                shape.1,
                w.rows(),
                w.cols()
            )));
        }
    }
    Ok(MergedModel {
        base,
        delta: merged,
    })
}

impl MergedModel<'_> {
    /// The model with the delta folded into its weights.
    pub fn materialize(&self) -> Result<Model> {
        self.base.fold(self.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::trainer::TrainConfig;

    fn site(i: usize) -> Site {
        Site::block(i, crate::model::LayerKind::Qkv)
    }

    fn vector(id: &str, data: &[&[f64]]) -> TaskVector {
        TaskVector {
            task_id: id.into(),
            layers: data
                .iter()
                .enumerate()
                .map(|(i, d)| (site(i), Matrix::from_vec(1, d.len(), d.to_vec()).unwrap()))
                .collect(),
        }
    }

    fn adapter(id: &str, values: Matrix, mask: SparseMask) -> Adapter {
        let mut layers = BTreeMap::new();
        layers.insert(site(0), AdapterLayer { values, mask });
        Adapter {
            task_id: id.into(),
            layers,
            config: TrainConfig::default(),
            train_loss: 0.0,
            val_loss: 0.0,
        }
    }

    #[test]
    fn overlap_counts() {
        let a = SparseMask::from_elements(2, 2, vec![(0, 0), (1, 0)]).unwrap();
        let b = SparseMask::from_elements(2, 2, vec![(0, 0), (1, 1)]).unwrap();
        let f = overlap_factor(&[&a, &b]).unwrap();
        assert_eq!(f, Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 1.0]]));
        assert_eq!(overlap_factor(&[&a]).unwrap(), Matrix::filled(2, 2, 1.0));
        let c = SparseMask::empty(3, 2);
        assert!(matches!(
            overlap_factor(&[&a, &c]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sparse_merge_averages_overlaps() {
        let a = adapter(
            "a",
            Matrix::from_rows(&[&[2.0, 5.0], &[0.0, 0.0]]),
            SparseMask::from_elements(2, 2, vec![(0, 0), (0, 1)]).unwrap(),
        );
        let b = adapter(
            "b",
            Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 7.0]]),
            SparseMask::from_elements(2, 2, vec![(0, 0), (1, 1)]).unwrap(),
        );
        let m = merge_sparse(&[&a, &b]).unwrap();
        let l = &m.layers[&site(0)];
        assert_eq!(l.values, Matrix::from_rows(&[&[3.0, 5.0], &[0.0, 7.0]]));
        assert_eq!(l.mask.len(), 3);
        assert!(merge_sparse(&[]).is_err());
    }

    #[test]
    fn sparse_merge_rejects_layer_mismatch() {
        let a = adapter("a", Matrix::zeros(2, 2), SparseMask::full(2, 2));
        let mut b = a.clone();
        b.layers.insert(
            site(1),
            AdapterLayer {
                values: Matrix::zeros(2, 2),
                mask: SparseMask::full(2, 2),
            },
        );
        assert!(matches!(merge_sparse(&[&a, &b]), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_basics() {
        let v = vector("v", &[&[1.0, -2.5, 3.0]]);
        let neg = vector("n", &[&[-1.0, 2.5, -3.0]]);
        let z = merge_uniform(&[&v, &neg]).unwrap();
        assert!(z.layers[&site(0)].data().iter().all(|x| *x == 0.0));
        assert_eq!(merge_uniform(&[&v]).unwrap().layers, v.layers);
        assert!(merge_uniform(&[]).is_err());
    }

    #[test]
    fn task_arithmetic_basics() {
        let v = vector("v", &[&[1.0, -2.5, 3.0]]);
        let w = vector("w", &[&[0.5, 0.5, 0.5]]);
        assert!(task_arithmetic(&[&v], 0.0).unwrap().layers[&site(0)]
            .data()
            .iter()
            .all(|x| *x == 0.0));
        assert_eq!(task_arithmetic(&[&v], 1.0).unwrap().layers, v.layers);
        assert_eq!(
            task_arithmetic(&[&v, &w], 0.5).unwrap().layers,
            merge_uniform(&[&v, &w]).unwrap().layers
        );
    }

    #[test]
    fn ties_examples() {
        let a = vector("a", &[&[1.0]]);
        let b = vector("b", &[&[3.0]]);
        assert_eq!(
            ties(&[&a, &b], 1.0, 1.0).unwrap().layers[&site(0)].data(),
            &[2.0]
        );
        let c = vector("c", &[&[-2.0]]);
        assert_eq!(
            ties(&[&a, &c], 1.0, 1.0).unwrap().layers[&site(0)].data(),
            &[-2.0]
        );
        let v = vector("v", &[&[0.3, -1.7, 2.2, 0.0]]);
        assert_eq!(ties(&[&v], 1.0, 1.0).unwrap().layers, v.layers);
        // Only the largest entry survives a 0.25 trim of four entries.
        assert_eq!(
            ties(&[&v], 1.0, 0.25).unwrap().layers[&site(0)].data(),
            &[0.0, 0.0, 2.2, 0.0]
        );
        assert!(ties(&[&v], 1.0, 0.0).is_err());
    }

    #[test]
    fn breadcrumbs_examples() {
        let v = vector(
            "v",
            &[&[0.5, -9.0, 1.0, 2.0, -0.1, 3.0, 4.0, -5.0, 6.0, 7.0]],
        );
        let out = breadcrumbs(&[&v], 1.0, 0.1, 0.1).unwrap();
        assert_eq!(
            out.layers[&site(0)].data(),
            &[0.5, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0, -5.0, 6.0, 7.0]
        );
        assert_eq!(
            breadcrumbs(&[&v], 0.4, 0.0, 0.0).unwrap(),
            task_arithmetic(&[&v], 0.4).unwrap()
        );
        assert!(breadcrumbs(&[&v], 1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn lora_average_cancels_opposite_a() {
        let mut rng = Rng::new(4);
        let a =
            crate::numerics::init_matrix(&mut rng, 4, 2, crate::numerics::InitScheme::ScaledNormal)
                .unwrap();
        let b =
            crate::numerics::init_matrix(&mut rng, 2, 3, crate::numerics::InitScheme::ScaledNormal)
                .unwrap();
        let mk = |a: Matrix| LoraAdapter {
            task_id: "l".into(),
            rank: 2,
            alpha: 2.0,
            layers: [(site(0), crate::model::LoraLayer { a, b: b.clone() })]
                .into_iter()
                .collect(),
        };
        let p = mk(a.clone());
        let n = mk(a.scale(-1.0));
        let z = merge_lora(&[&p, &n]).unwrap();
        assert!(z.layers[&site(0)].data().iter().all(|x| *x == 0.0));
        assert_eq!(
            merge_lora(&[&p]).unwrap().layers[&site(0)],
            p.layer_delta(site(0)).unwrap()
        );
    }

    #[test]
    fn dispatch_checks_expert_kinds() {
        let v = Expert::Dense(vector("v", &[&[1.0]]));
        assert!(merge(&MergeSpec::new(MergeMethod::SparseOverlap), &[&v]).is_err());
        assert!(merge(&MergeSpec::new(MergeMethod::LoraAverage), &[&v]).is_err());
        assert!(merge(&MergeSpec::new(MergeMethod::Ties), &[&v]).is_ok());
        assert!(MergeMethod::parse("dare").is_err());
        for m in MergeMethod::ALL {
            assert_eq!(MergeMethod::parse(m.name()).unwrap(), m);
        }
    }
}
