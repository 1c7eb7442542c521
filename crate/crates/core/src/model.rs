//! A small pre-norm transformer classifier with additive weight deltas.
//!
//! Each block holds a fused `d x 3d` QKV projection, an output projection,
//! and a two-matrix GELU MLP. Token embeddings feed the first block; the
//! final hidden states are normalized, mean-pooled per sequence and mapped
//! to class logits. There are no biases and no positional encodings.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{init_matrix, GradientTape, InitScheme, Matrix, Rng, Var};
use crate::saliency::SparseMask;

/// Layer families an adapter may attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdaptTarget {
    Qkv,
    O,
    /// The MLP down projection.
    Mlp,
}

impl AdaptTarget {
    pub fn kind(self) -> LayerKind {
        match self {
            AdaptTarget::Qkv => LayerKind::Qkv,
            AdaptTarget::O => LayerKind::Out,
            AdaptTarget::Mlp => LayerKind::MlpDown,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdaptTarget::Qkv => "qkv",
            AdaptTarget::O => "o",
            AdaptTarget::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qkv" => Ok(AdaptTarget::Qkv),
            "o" | "out" => Ok(AdaptTarget::O),
            "mlp" => Ok(AdaptTarget::Mlp),
            other => Err(Error::Input(format!("unknown adapt target {other:?}"))),
        }
    }

    /// Parses a `+`- or `,`-separated list such as `qkv+o`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = s
            .split(['+', ','])
            .filter(|p| !p.trim().is_empty())
            .map(Self::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn list_name(targets: &[AdaptTarget]) -> String {
        targets
            .iter()
            .map(|t| t.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Qkv,
    Out,
    MlpUp,
    MlpDown,
}

/// Identifies one weight matrix of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Embedding,
    Block { layer: usize, kind: LayerKind },
    Head,
}

impl Site {
    pub fn block(layer: usize, kind: LayerKind) -> Self {
        Site::Block { layer, kind }
    }

    /// Compact numeric encoding used by the adapter file format.
    pub fn code(self) -> u32 {
        match self {
            Site::Embedding => 0,
            Site::Head => 1,
            Site::Block { layer, kind } => {
                let k = match kind {
                    LayerKind::Qkv => 0,
                    LayerKind::Out => 1,
                    LayerKind::MlpUp => 2,
                    LayerKind::MlpDown => 3,
                };
                0x100 + (layer as u32) * 4 + k
            }
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Site::Embedding),
            1 => Some(Site::Head),
            c if c >= 0x100 => {
                let kind = match (c - 0x100) % 4 {
                    0 => LayerKind::Qkv,
                    1 => LayerKind::Out,
                    2 => LayerKind::MlpUp,
                    _ => LayerKind::MlpDown,
                };
                Some(Site::block(((c - 0x100) / 4) as usize, kind))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Embedding => write!(f, "embedding"),
            Site::Head => write!(f, "head"),
            Site::Block { layer, kind } => {
                let k = match kind {
                    LayerKind::Qkv => "qkv",
                    LayerKind::Out => "o",
                    LayerKind::MlpUp => "mlp_up",
                    LayerKind::MlpDown => "mlp_down",
                };
                write!(f, "block{layer}.{k}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    /// MLP inner width as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    pub adapt_targets: Vec<AdaptTarget>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 2,
            vocab_size: 48,
            num_classes: 4,
            seq_len: 8,
            mlp_ratio: 2,
            adapt_targets: vec![AdaptTarget::Qkv],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Input("num_classes must be at least 2".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Input(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        let d = self.hidden_dim;
        match site {
            Site::Embedding => (self.vocab_size, d),
            Site::Head => (d, self.num_classes),
            Site::Block { kind, .. } => match kind {
                LayerKind::Qkv => (d, 3 * d),
                LayerKind::Out => (d, d),
                LayerKind::MlpUp => (d, self.mlp_ratio * d),
                LayerKind::MlpDown => (self.mlp_ratio * d, d),
            },
        }
    }

    /// Every matrix of the model, in a fixed order.
    pub fn all_sites(&self) -> Vec<Site> {
        let mut v = vec![Site::Embedding];
        for l in 0..self.num_layers {
            for kind in [
                LayerKind::Qkv,
                LayerKind::Out,
                LayerKind::MlpUp,
                LayerKind::MlpDown,
            ] {
                v.push(Site::block(l, kind));
            }
        }
        v.push(Site::Head);
        v
    }

    /// Sites covered by `adapt_targets`, ordered by layer then kind.
    pub fn adapted_sites(&self) -> Vec<Site> {
        let mut v = Vec::new();
        for l in 0..self.num_layers {
            for t in &self.adapt_targets {
                v.push(Site::block(l, t.kind()));
            }
        }
        v.sort();
        v
    }
}

/// Frozen base weights plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: BTreeMap<Site, Matrix>,
}

pub fn build_model(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
    config.validate()?;
    let mut weights = BTreeMap::new();
    for site in config.all_sites() {
        let (r, c) = config.site_shape(site);
        // Embedding rows are unit-scale token vectors; everything else is
        // scaled by fan-in.
        let m = match site {
            Site::Embedding => {
                let data = (0..r * c).map(|_| rng.normal()).collect();
                Matrix::from_vec(r, c, data)?
            }
            _ => {
                let mut m = init_matrix(rng, r, c, InitScheme::ScaledNormal)?;
                let fan_in_scale = (c as f64 / r as f64).sqrt();
                m.data_mut().iter_mut().for_each(|v| *v *= fan_in_scale);
                m
            }
        };
        weights.insert(site, m);
    }
    Ok(Model { config, weights })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weight(&self, site: Site) -> Result<&Matrix> {
        self.weights
            .get(&site)
            .ok_or_else(|| Error::Input(format!("model has no layer {site}")))
    }

    pub fn weights(&self) -> &BTreeMap<Site, Matrix> {
        &self.weights
    }

    /// A copy of this model with different weights for some sites.
    pub fn with_weights(&self, replaced: BTreeMap<Site, Matrix>) -> Result<Model> {
        let mut weights = self.weights.clone();
        for (site, m) in replaced {
            let old = self.weight(site)?;
            old.ensure_same_shape(&m, &format!("replacing {site}"))?;
            weights.insert(site, m);
        }
        Ok(Model {
            config: self.config.clone(),
            weights,
        })
    }

    /// Folds every delta into the base weights.
    pub fn fold(&self, delta: &dyn WeightDelta) -> Result<Model> {
        let mut replaced = BTreeMap::new();
        for (site, d) in delta.layer_deltas() {
            let w = self.weight(site)?;
            replaced.insert(site, d.apply_to(w)?);
        }
        self.with_weights(replaced)
    }

    /// The same weights with a different set of adapted layer kinds.
    pub fn with_adapt_targets(&self, targets: Vec<AdaptTarget>) -> Result<Model> {
        let config = ModelConfig {
            adapt_targets: targets,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Model {
            config,
            weights: self.weights.clone(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Matrix::len).sum()
    }
}

/// Returns `W + values ∘ mask`; entries outside the mask are copied from
/// `base` untouched.
pub fn effective_weight(base: &Matrix, values: &Matrix, mask: &SparseMask) -> Result<Matrix> {
    base.ensure_same_shape(values, "effective_weight")?;
    if mask.shape() != base.shape() {
        return Err(Error::Dimension(format!(
            "effective_weight: mask {:?} vs weight {:?}",
            mask.shape(),
            base.shape()
        )));
    }
    let mut out = base.clone();
    for (r, c) in mask.entries() {
        out.set(r, c, base.get(r, c) + values.get(r, c));
    }
    Ok(out)
}

/// `(alpha / r) * A * B` for `A: d1 x r`, `B: r x d2`.
pub fn lora_delta(a: &Matrix, b: &Matrix, alpha: f64) -> Result<Matrix> {
    if a.cols() != b.rows() || a.cols() == 0 {
        return Err(Error::Dimension(format!(
            "lora rank mismatch: A is {}x{}, B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(a.matmul(b)?.scale(alpha / a.cols() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub task_id: String,
    pub rank: usize,
    pub alpha: f64,
    pub layers: BTreeMap<Site, LoraLayer>,
}

impl LoraAdapter {
    /// `A` scaled-normal, `B` zero: the initial delta vanishes.
    pub fn init(model: &Model, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Input("lora rank must be positive".into()));
        }
        let cfg = model.config();
        let mut layers = BTreeMap::new();
        for site in cfg.adapted_sites() {
            let (d1, d2) = cfg.site_shape(site);
            layers.insert(
                site,
                LoraLayer {
                    a: init_matrix(rng, d1, rank, InitScheme::ScaledNormal)?,
                    b: Matrix::zeros(rank, d2),
                },
            );
        }
        Ok(Self {
            task_id: String::new(),
            rank,
            alpha,
            layers,
        })
    }

    pub fn layer_delta(&self, site: Site) -> Result<Matrix> {
        let l = self
            .layers
            .get(&site)
            .ok_or_else(|| Error::Input(format!("lora adapter has no layer {site}")))?;
        lora_delta(&l.a, &l.b, self.alpha)
    }
}

/// Additive update for one weight matrix, borrowed from its owner.
#[derive(Clone, Copy, Debug)]
pub enum LayerDelta<'a> {
    /// `values ∘ mask`, or all of `values` when `mask` is `None`.
    Sparse {
        values: &'a Matrix,
        mask: Option<&'a SparseMask>,
    },
    Dense(&'a Matrix),
    LowRank {
        a: &'a Matrix,
        b: &'a Matrix,
        alpha: f64,
    },
}

impl LayerDelta<'_> {
    pub fn apply_to(&self, base: &Matrix) -> Result<Matrix> {
        match *self {
            LayerDelta::Sparse {
                values,
                mask: Some(m),
            } => effective_weight(base, values, m),
            LayerDelta::Sparse { values, mask: None } | LayerDelta::Dense(values) => {
                base.add(values)
            }
            LayerDelta::LowRank { a, b, alpha } => base.add(&lora_delta(a, b, alpha)?),
        }
    }
}

/// Anything that perturbs some of the model's weights additively.
pub trait WeightDelta {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)>;
}

/// The unmodified base model.
pub struct NoDelta;

impl WeightDelta for NoDelta {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
        Vec::new()
    }
}

impl WeightDelta for LoraAdapter {
    fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
        self.layers
            .iter()
            .map(|(s, l)| {
                (
                    *s,
                    LayerDelta::LowRank {
                        a: &l.a,
                        b: &l.b,
                        alpha: self.alpha,
                    },
                )
            })
            .collect()
    }
}

/// Identifies something that can receive a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    /// A base weight; only differentiated when explicitly requested.
    Base(Site),
    /// The values of a sparse or dense delta.
    Delta(Site),
    LoraA(Site),
    LoraB(Site),
}

/// A batch of equal-length token sequences with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub seq_len: usize,
    /// `len() * seq_len` tokens, sequence after sequence.
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Forward {
    tape: GradientTape<ParamId>,
    logits: Var,
}

fn check_finite(
    tape: &GradientTape<ParamId>,
    v: Var,
    layer: impl FnOnce() -> String,
) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer() })
    }
}

fn forward(
    model: &Model,
    delta: &dyn WeightDelta,
    batch: &Batch,
    trainables: &[ParamId],
) -> Result<Forward> {
    let cfg = &model.config;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if batch.seq_len != cfg.seq_len || batch.tokens.len() != batch.len() * batch.seq_len {
        return Err(Error::Input(format!(
            "batch of {} tokens for {} sequences of length {} (model expects {})",
            batch.tokens.len(),
            batch.len(),
            batch.seq_len,
            cfg.seq_len
        )));
    }
    let deltas: HashMap<Site, LayerDelta<'_>> = delta.layer_deltas().into_iter().collect();
    for site in deltas.keys() {
        model.weight(*site)?;
    }
    for p in trainables {
        let ok = match p {
            ParamId::Base(s) => model.weights.contains_key(s),
            ParamId::Delta(s) => matches!(
                deltas.get(s),
                Some(LayerDelta::Sparse { .. } | LayerDelta::Dense(_))
            ),
            ParamId::LoraA(s) | ParamId::LoraB(s) => {
                matches!(deltas.get(s), Some(LayerDelta::LowRank { .. }))
            }
        };
        if !ok {
            return Err(Error::Input(format!(
                "requested parameter {p:?} does not exist"
            )));
        }
    }
    let wants = |p: ParamId| trainables.contains(&p);

    let mut tape = GradientTape::new();
    let weight = |tape: &mut GradientTape<ParamId>, site: Site| -> Result<Var> {
        let base = model.weight(site)?.clone();
        let w = if wants(ParamId::Base(site)) {
            tape.param(ParamId::Base(site), base)
        } else {
            tape.constant(base)
        };
        let Some(d) = deltas.get(&site) else {
            return Ok(w);
        };
        let leaf = |tape: &mut GradientTape<ParamId>, id: ParamId, m: &Matrix| {
            if wants(id) {
                tape.param(id, m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let dv = match *d {
            LayerDelta::Sparse { values, mask } => {
                let v = leaf(tape, ParamId::Delta(site), values);
                match mask {
                    Some(m) => tape.mask(v, m.to_dense())?,
                    None => v,
                }
            }
            LayerDelta::Dense(values) => leaf(tape, ParamId::Delta(site), values),
            LayerDelta::LowRank { a, b, alpha } => {
                let av = leaf(tape, ParamId::LoraA(site), a);
                let bv = leaf(tape, ParamId::LoraB(site), b);
                let ab = tape.matmul(av, bv)?;
                tape.scale(ab, alpha / a.cols() as f64)
            }
        };
        tape.add(w, dv)
    };

    let emb = weight(&mut tape, Site::Embedding)?;
    let mut x = tape.gather(emb, &batch.tokens)?;
    for l in 0..cfg.num_layers {
        let h = tape.layer_norm(x);
        let wqkv = weight(&mut tape, Site::block(l, LayerKind::Qkv))?;
        let qkv = tape.matmul(h, wqkv)?;
        let att = tape.attention(qkv, cfg.seq_len, cfg.num_heads)?;
        let wo = weight(&mut tape, Site::block(l, LayerKind::Out))?;
        let proj = tape.matmul(att, wo)?;
        x = tape.add(x, proj)?;
        let h2 = tape.layer_norm(x);
        let wup = weight(&mut tape, Site::block(l, LayerKind::MlpUp))?;
        let up = tape.matmul(h2, wup)?;
        let act = tape.gelu(up);
        let wdown = weight(&mut tape, Site::block(l, LayerKind::MlpDown))?;
        let down = tape.matmul(act, wdown)?;
        x = tape.add(x, down)?;
        check_finite(&tape, x, || format!("block{l}"))?;
    }
    let xn = tape.layer_norm(x);
    let pooled = tape.mean_pool(xn, cfg.seq_len)?;
    let head = weight(&mut tape, Site::Head)?;
    let logits = tape.matmul(pooled, head)?;
    check_finite(&tape, logits, || "head".to_string())?;
    Ok(Forward { tape, logits })
}

/// Class logits, one row per sequence.
pub fn logits(model: &Model, delta: &dyn WeightDelta, batch: &Batch) -> Result<Matrix> {
    let f = forward(model, delta, batch, &[])?;
    Ok(f.tape.value(f.logits).clone())
}

/// Mean cross-entropy over `batch` and its exact gradient for each
/// requested parameter. Base weights are differentiated only when listed as
/// [`ParamId::Base`].
pub fn loss_and_grads(
    model: &Model,
    delta: &dyn WeightDelta,
    batch: &Batch,
    trainables: &[ParamId],
) -> Result<(f64, HashMap<ParamId, Matrix>)> {
    let Forward { mut tape, logits } = forward(model, delta, batch, trainables)?;
    let loss_var = tape.cross_entropy(logits, &batch.labels)?;
    let loss = tape.value(loss_var).get(0, 0);
    if !loss.is_finite() {
        return Err(Error::Numeric {
            layer: "cross-entropy".into(),
        });
    }
    if trainables.is_empty() {
        return Ok((loss, HashMap::new()));
    }
    let mut grads = tape.backward(loss_var)?;
    // Parameters that cannot reach the loss still get an explicit zero.
    for p in trainables {
        if !grads.contains_key(p) {
            let shape = match p {
                ParamId::Base(s) | ParamId::Delta(s) => model.config.site_shape(*s),
                ParamId::LoraA(s) => (model.config.site_shape(*s).0, lora_rank(delta, *s)),
                ParamId::LoraB(s) => (lora_rank(delta, *s), model.config.site_shape(*s).1),
            };
            grads.insert(*p, Matrix::zeros(shape.0, shape.1));
        }
    }
    Ok((loss, grads))
}

fn lora_rank(delta: &dyn WeightDelta, site: Site) -> usize {
    delta
        .layer_deltas()
        .into_iter()
        .find_map(|(s, d)| match d {
            LayerDelta::LowRank { a, .. } if s == site => Some(a.cols()),
            _ => None,
        })
        .unwrap_or(0)
}

/// Mean loss without gradients.
pub fn loss(model: &Model, delta: &dyn WeightDelta, batch: &Batch) -> Result<f64> {
    loss_and_grads(model, delta, batch, &[]).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            vocab_size: 10,
            num_classes: 3,
            seq_len: 4,
            mlp_ratio: 2,
            adapt_targets: vec![AdaptTarget::Qkv],
        }
    }

    fn random_batch(rng: &mut Rng, cfg: &ModelConfig, n: usize) -> Batch {
        Batch {
            seq_len: cfg.seq_len,
            tokens: (0..n * cfg.seq_len)
                .map(|_| rng.below(cfg.vocab_size))
                .collect(),
            labels: (0..n).map(|_| rng.below(cfg.num_classes)).collect(),
        }
    }

    struct SparseOne<'a>(Site, &'a Matrix, &'a SparseMask);
    impl WeightDelta for SparseOne<'_> {
        fn layer_deltas(&self) -> Vec<(Site, LayerDelta<'_>)> {
            vec![(
                self.0,
                LayerDelta::Sparse {
                    values: self.1,
                    mask: Some(self.2),
                },
            )]
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(tiny_config(), &mut Rng::new(1)).unwrap();
        let b = build_model(tiny_config(), &mut Rng::new(1)).unwrap();
        for (x, y) in a.weights().values().zip(b.weights().values()) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        let err = build_model(cfg, &mut Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn default_forward_shape() {
        let cfg = ModelConfig::default();
        let model = build_model(cfg.clone(), &mut Rng::new(2)).unwrap();
        let batch = random_batch(&mut Rng::new(3), &cfg, 5);
        let l = logits(&model, &NoDelta, &batch).unwrap();
        assert_eq!(l.shape(), (5, cfg.num_classes));
        assert!(l.is_finite());
    }

    #[test]
    fn effective_weight_cases() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let v = Matrix::from_rows(&[&[10.0, 99.0], &[99.0, 99.0]]);
        let single = SparseMask::from_elements(2, 2, vec![(0, 0)]).unwrap();
        assert_eq!(
            effective_weight(&w, &v, &single).unwrap(),
            Matrix::from_rows(&[&[11.0, 2.0], &[3.0, 4.0]])
        );
        assert!(effective_weight(&w, &v, &SparseMask::empty(2, 2))
            .unwrap()
            .bit_eq(&w));
        let neg = w.scale(-1.0);
        assert_eq!(
            effective_weight(&w, &neg, &SparseMask::full(2, 2)).unwrap(),
            Matrix::zeros(2, 2)
        );
        assert!(effective_weight(&w, &Matrix::zeros(3, 2), &single).is_err());
    }

    #[test]
    fn lora_delta_cases() {
        let a = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let b = Matrix::from_rows(&[&[3.0, 4.0]]);
        assert_eq!(
            lora_delta(&a, &b, 1.0).unwrap(),
            Matrix::from_rows(&[&[3.0, 4.0], &[6.0, 8.0]])
        );
        assert_eq!(
            lora_delta(&Matrix::zeros(2, 1), &b, 1.0).unwrap(),
            Matrix::zeros(2, 2)
        );
        assert!(lora_delta(&a, &Matrix::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn zero_adapter_is_bitwise_base() {
        let cfg = tiny_config();
        let model = build_model(cfg.clone(), &mut Rng::new(4)).unwrap();
        let batch = random_batch(&mut Rng::new(5), &cfg, 3);
        let site = Site::block(0, LayerKind::Qkv);
        let zeros = Matrix::zeros(8, 24);
        let mask = SparseMask::full(8, 24);
        let base = loss(&model, &NoDelta, &batch).unwrap();
        let (with, _) = loss_and_grads(
            &model,
            &SparseOne(site, &zeros, &mask),
            &batch,
            &[ParamId::Delta(site)],
        )
        .unwrap();
        assert_eq!(base.to_bits(), with.to_bits());
    }

    #[test]
    fn uniform_head_loss_is_log_classes() {
        let cfg = tiny_config();
        let model = build_model(cfg.clone(), &mut Rng::new(6)).unwrap();
        let mut repl = BTreeMap::new();
        repl.insert(Site::Head, Matrix::zeros(8, 3));
        let flat = model.with_weights(repl).unwrap();
        let batch = random_batch(&mut Rng::new(7), &cfg, 1);
        let l = loss(&flat, &NoDelta, &batch).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = tiny_config();
        let model = build_model(cfg, &mut Rng::new(6)).unwrap();
        let batch = Batch {
            seq_len: 4,
            tokens: vec![],
            labels: vec![],
        };
        assert!(matches!(
            loss(&model, &NoDelta, &batch),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn base_gets_no_gradient_unless_requested() {
        let cfg = tiny_config();
        let model = build_model(cfg.clone(), &mut Rng::new(8)).unwrap();
        let batch = random_batch(&mut Rng::new(9), &cfg, 2);
        let site = Site::block(1, LayerKind::Qkv);
        let zeros = Matrix::zeros(8, 24);
        let mask = SparseMask::full(8, 24);
        let (_, g) = loss_and_grads(
            &model,
            &SparseOne(site, &zeros, &mask),
            &batch,
            &[ParamId::Delta(site)],
        )
        .unwrap();
        assert_eq!(g.len(), 1);
        assert!(!g.contains_key(&ParamId::Base(site)));
    }

    #[test]
    fn site_codes_round_trip() {
        for site in tiny_config().all_sites() {
            assert_eq!(Site::from_code(site.code()), Some(site));
        }
    }
}
