//! Parameter importance scores and the masks built from them.
//!
//! Masks are stored as sorted coordinate lists, either per element or per
//! `B x B` block on a grid anchored at the origin.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Guards `floor(kr * n)` against representation error in `kr`, so that
/// e.g. `0.29 * 100` counts as 29.
const COUNT_EPS: f64 = 1e-9;

pub(crate) fn keep_count(kr: f64, n: usize) -> usize {
    (kr * n as f64 + COUNT_EPS).floor() as usize
}

fn check_kr(kr: f64) -> Result<()> {
    if !(kr > 0.0 && kr <= 1.0) {
        return Err(Error::Input(format!(
            "keep ratio must lie in (0, 1], got {kr}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Selected `(row, col)` entries in strictly increasing order.
    Element(Vec<(u32, u32)>),
    /// Selected blocks by `(block_row, block_col)` in strictly increasing
    /// order; block `(i, j)` covers rows `i*size..(i+1)*size`.
    Block { size: u32, blocks: Vec<(u32, u32)> },
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SparseMask {
    rows: usize,
    cols: usize,
    kind: MaskKind,
}

impl fmt::Debug for SparseMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SparseMask {}x{} {} ({} entries)",
            self.rows,
            self.cols,
            match &self.kind {
                MaskKind::Element(_) => "element".to_string(),
                MaskKind::Block { size, blocks } => format!("{} blocks of {size}", blocks.len()),
            },
            self.len()
        )
    }
}

impl SparseMask {
    pub fn from_elements(rows: usize, cols: usize, mut coords: Vec<(u32, u32)>) -> Result<Self> {
        coords.sort_unstable();
        coords.dedup();
        if let Some(&(r, c)) = coords
            .iter()
            .find(|&&(r, c)| r as usize >= rows || c as usize >= cols)
        {
            return Err(Error::Input(format!(
                "coordinate ({r}, {c}) outside a {rows}x{cols} mask"
            )));
        }
        Ok(Self {
            rows,
            cols,
            kind: MaskKind::Element(coords),
        })
    }

    pub fn from_blocks(
        rows: usize,
        cols: usize,
        size: usize,
        mut blocks: Vec<(u32, u32)>,
    ) -> Result<Self> {
        if size == 0 || !rows.is_multiple_of(size) || !cols.is_multiple_of(size) {
            return Err(Error::Input(format!(
                "block size {size} does not tile a {rows}x{cols} matrix"
            )));
        }
        blocks.sort_unstable();
        blocks.dedup();
        let (br, bc) = (rows / size, cols / size);
        if let Some(&(r, c)) = blocks
            .iter()
            .find(|&&(r, c)| r as usize >= br || c as usize >= bc)
        {
            return Err(Error::Input(format!(
                "block ({r}, {c}) outside a {br}x{bc} block grid"
            )));
        }
        Ok(Self {
            rows,
            cols,
            kind: MaskKind::Block {
                size: size as u32,
                blocks,
            },
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            kind: MaskKind::Element(Vec::new()),
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let coords = (0..rows as u32)
            .flat_map(|r| (0..cols as u32).map(move |c| (r, c)))
            .collect();
        Self {
            rows,
            cols,
            kind: MaskKind::Element(coords),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn kind(&self) -> &MaskKind {
        &self.kind
    }

    pub fn block_size(&self) -> Option<usize> {
        match &self.kind {
            MaskKind::Block { size, .. } => Some(*size as usize),
            MaskKind::Element(_) => None,
        }
    }

    /// Number of selected entries.
    pub fn len(&self) -> usize {
        match &self.kind {
            MaskKind::Element(c) => c.len(),
            MaskKind::Block { size, blocks } => blocks.len() * (*size as usize).pow(2),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        match &self.kind {
            MaskKind::Element(coords) => coords.binary_search(&(r as u32, c as u32)).is_ok(),
            MaskKind::Block { size, blocks } => {
                let s = *size as usize;
                blocks
                    .binary_search(&((r / s) as u32, (c / s) as u32))
                    .is_ok()
            }
        }
    }

    /// Selected entries. Element masks yield row-major order; block masks
    /// yield block by block, row-major inside each block.
    pub fn entries(&self) -> Box<dyn Iterator<Item = (usize, usize)> + '_> {
        match &self.kind {
            MaskKind::Element(coords) => {
                Box::new(coords.iter().map(|&(r, c)| (r as usize, c as usize)))
            }
            MaskKind::Block { size, blocks } => {
                let s = *size as usize;
                Box::new(blocks.iter().flat_map(move |&(br, bc)| {
                    let (r0, c0) = (br as usize * s, bc as usize * s);
                    (0..s).flat_map(move |i| (0..s).map(move |j| (r0 + i, c0 + j)))
                }))
            }
        }
    }

    /// Dense 0/1 indicator.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for (r, c) in self.entries() {
            m.set(r, c, 1.0);
        }
        m
    }

    /// Row-major sorted entries regardless of kind.
    pub fn sorted_entries(&self) -> Vec<(u32, u32)> {
        match &self.kind {
            MaskKind::Element(c) => c.clone(),
            MaskKind::Block { .. } => {
                let mut v: Vec<(u32, u32)> =
                    self.entries().map(|(r, c)| (r as u32, c as u32)).collect();
                v.sort_unstable();
                v
            }
        }
    }

    /// Union of equally shaped masks. Block masks sharing one block size
    /// stay block-structured; anything else becomes an element mask.
    pub fn union(masks: &[&SparseMask]) -> Result<SparseMask> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Input("union of zero masks".into()))?;
        let shape = first.shape();
        for m in masks {
            if m.shape() != shape {
                return Err(Error::Dimension(format!(
                    "mask union: {}x{} vs {}x{}",
                    shape.0, shape.1, m.rows, m.cols
                )));
            }
        }
        let common_block = first
            .block_size()
            .filter(|&b| masks.iter().all(|m| m.block_size() == Some(b)));
        if let Some(size) = common_block {
            let blocks = masks
                .iter()
                .flat_map(|m| match &m.kind {
                    MaskKind::Block { blocks, .. } => blocks.clone(),
                    MaskKind::Element(_) => unreachable!(),
                })
                .collect();
            return SparseMask::from_blocks(shape.0, shape.1, size, blocks);
        }
        let mut coords: Vec<(u32, u32)> = masks.iter().flat_map(|m| m.sorted_entries()).collect();
        coords.sort_unstable();
        coords.dedup();
        Ok(SparseMask {
            rows: shape.0,
            cols: shape.1,
            kind: MaskKind::Element(coords),
        })
    }
}

/// Scoring rule used when building a mask during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Signed connection sensitivity `w * g`.
    Mcs,
    /// Connection sensitivity `|w * g|`.
    Cs,
    /// Gradient magnitude `|g|`.
    Gm,
    /// Weight magnitude `|w|`.
    Wm,
    /// Grow-and-drop: keep by distance from initialization, grow by `|g|`.
    Gd,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Mcs,
        Criterion::Cs,
        Criterion::Gm,
        Criterion::Wm,
        Criterion::Gd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Mcs => "mcs",
            Criterion::Cs => "cs",
            Criterion::Gm => "gm",
            Criterion::Wm => "wm",
            Criterion::Gd => "gd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown criterion {s:?}")))
    }

    pub fn code(self) -> u8 {
        match self {
            Criterion::Mcs => 0,
            Criterion::Cs => 1,
            Criterion::Gm => 2,
            Criterion::Wm => 3,
            Criterion::Gd => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Criterion::ALL.into_iter().find(|c| c.code() == code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Mcs,
    Cs,
    Gm,
    Wm,
    GdDrop,
    GdGrow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub kind: ScoreKind,
    pub scores: Matrix,
}

impl ScoreField {
    pub fn new(kind: ScoreKind, scores: Matrix) -> Self {
        Self { kind, scores }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.scores.shape()
    }

    fn max(&self) -> f64 {
        self.scores
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn score(
    kind: ScoreKind,
    weights: &Matrix,
    grads: &Matrix,
    initial_weights: Option<&Matrix>,
) -> Result<ScoreField> {
    weights.ensure_same_shape(grads, "score weights vs grads")?;
    let scores = match kind {
        ScoreKind::Mcs => weights.zip_map(grads, |w, g| w * g),
        ScoreKind::Cs => weights.zip_map(grads, |w, g| (w * g).abs()),
        ScoreKind::Gm | ScoreKind::GdGrow => grads.map(f64::abs),
        ScoreKind::Wm => weights.map(f64::abs),
        ScoreKind::GdDrop => {
            let init = initial_weights.ok_or_else(|| {
                Error::Input("grow-and-drop scoring needs the initial weights".into())
            })?;
            weights.ensure_same_shape(init, "score weights vs initial weights")?;
            weights.zip_map(init, |w, w0| (w - w0).abs())
        }
    };
    Ok(ScoreField { kind, scores })
}

/// Descending score, then ascending index.
fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` best entries of `scores` under [`rank_order`], sorted
/// ascending.
pub(crate) fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, rank_order(scores));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Keeps the `max(1, floor(kr * d1 * d2))` highest-scoring entries; ties go
/// to the lowest row-major index.
pub fn topk_mask(scores: &ScoreField, kr: f64) -> Result<SparseMask> {
    check_kr(kr)?;
    let (rows, cols) = scores.shape();
    let k = keep_count(kr, rows * cols).max(1);
    let coords = top_indices(scores.scores.data(), k)
        .into_iter()
        .map(|i| ((i / cols) as u32, (i % cols) as u32))
        .collect();
    Ok(SparseMask {
        rows,
        cols,
        kind: MaskKind::Element(coords),
    })
}

/// Number of blocks a block mask keeps: `floor(kr * d1 * d2 / B^2)`.
pub fn block_count(kr: f64, rows: usize, cols: usize, block: usize) -> usize {
    (kr * (rows * cols) as f64 / (block * block) as f64 + COUNT_EPS).floor() as usize
}

/// Keeps the top `N_B` grid-aligned `block x block` tiles ranked by summed
/// entry score; ties go to the lowest block index.
pub fn block_mask(scores: &ScoreField, kr: f64, block: usize) -> Result<SparseMask> {
    check_kr(kr)?;
    let (rows, cols) = scores.shape();
    if block == 0 || rows % block != 0 || cols % block != 0 {
        return Err(Error::Input(format!(
            "block size {block} does not divide a {rows}x{cols} layer"
        )));
    }
    let nb = block_count(kr, rows, cols, block);
    if nb < 1 {
        return Err(Error::Input(format!(
            "keep ratio {kr} leaves no {block}x{block} block in a {rows}x{cols} layer"
        )));
    }
    let (br, bc) = (rows / block, cols / block);
    let mut sums = vec![0.0; br * bc];
    for r in 0..rows {
        let row = scores.scores.row(r);
        for (c, v) in row.iter().enumerate() {
            sums[(r / block) * bc + c / block] += v;
        }
    }
    let blocks = top_indices(&sums, nb)
        .into_iter()
        .map(|i| ((i / bc) as u32, (i % bc) as u32))
        .collect();
    Ok(SparseMask {
        rows,
        cols,
        kind: MaskKind::Block {
            size: block as u32,
            blocks,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDrop {
    pub threshold: f64,
    /// One flag per input layer; `false` means dropped.
    pub active: Vec<bool>,
}

impl LayerDrop {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Global layer pruning: the threshold is the k-th highest score across all
/// layers (`k = max(1, floor(kr * total))`), and a layer is dropped when its
/// largest score falls below it.
pub fn layer_drop(per_layer: &[ScoreField], kr: f64) -> Result<LayerDrop> {
    check_kr(kr)?;
    if per_layer.is_empty() {
        return Err(Error::Input("layer drop over zero layers".into()));
    }
    let total: usize = per_layer.iter().map(|s| s.scores.len()).sum();
    if total == 0 {
        return Err(Error::Input("layer drop over empty score fields".into()));
    }
    let k = keep_count(kr, total).max(1);
    let mut all: Vec<f64> = per_layer
        .iter()
        .flat_map(|s| s.scores.data().iter().copied())
        .collect();
    let (_, kth, _) = all.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let threshold = *kth;
    let active = per_layer
        .iter()
        .map(|s| !s.scores.is_empty() && s.max() >= threshold)
        .collect();
    Ok(LayerDrop { threshold, active })
}
