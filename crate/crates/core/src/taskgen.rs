//! Deterministic synthetic classification tasks.
//!
//! Every example is a token sequence `[task_token, c_1, .., c_{L-1}]` whose
//! content tokens come from a shared vocabulary of `content_vocab` symbols.
//! The leading task token (`content_vocab + slot`) tells a multitask model
//! which labeling rule applies. Labels depend only on content-token counts.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    /// Argmax of a frozen random network over token counts. The hidden
    /// layer is shared by every teacher task of a suite (seeded by
    /// `body_seed`); the output layer belongs to the task.
    Teacher { body_seed: u64, hidden: usize },
    /// Which of the candidate tokens occurs most often (ties rejected).
    Majority { candidates: Vec<u32> },
    /// How often `marker` occurs, bucketed as 0, 1, .., `num_classes - 1`
    /// or more.
    MarkerCount { marker: u32 },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Teacher { .. } => "teacher",
            Family::Majority { .. } => "majority",
            Family::MarkerCount { .. } => "marker",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    /// Position of this task's token after the content vocabulary.
    pub slot: usize,
    pub family: Family,
    pub num_classes: usize,
    pub content_vocab: usize,
    pub seq_len: usize,
    /// Log-scale spread of the content-token distribution; 0 is uniform.
    pub input_skew: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn task_token(&self) -> u32 {
        (self.content_vocab + self.slot) as u32
    }

    pub fn total_size(&self) -> usize {
        self.train_size + self.val_size + self.test_size
    }

    fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Input(format!(
                "task {}: split sizes must be positive",
                self.id
            )));
        }
        if self.num_classes < 2 || self.seq_len < 2 || self.content_vocab < self.num_classes {
            return Err(Error::Input(format!(
                "task {}: need at least 2 classes, sequence length 2 and as many content tokens as classes",
                self.id
            )));
        }
        match &self.family {
            Family::Teacher { hidden, .. } if *hidden == 0 => Err(Error::Input(format!(
                "task {}: teacher needs a hidden layer",
                self.id
            ))),
            Family::Majority { candidates } => {
                let distinct: HashSet<_> = candidates.iter().collect();
                if candidates.len() != self.num_classes
                    || distinct.len() != candidates.len()
                    || candidates.iter().any(|&c| c as usize >= self.content_vocab)
                {
                    return Err(Error::Input(format!(
                        "task {}: majority needs {} distinct content candidates",
                        self.id, self.num_classes
                    )));
                }
                Ok(())
            }
            Family::MarkerCount { marker } if *marker as usize >= self.content_vocab => {
                Err(Error::Input(format!(
                    "task {}: marker outside content vocabulary",
                    self.id
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn id(&self) -> &str {
        &self.spec.id
    }
}

/// Packs examples into a model batch.
pub fn batch<'a>(examples: impl IntoIterator<Item = &'a Example>, seq_len: usize) -> Batch {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for ex in examples {
        tokens.extend(ex.tokens.iter().map(|&t| t as usize));
        labels.push(ex.label as usize);
    }
    Batch {
        seq_len,
        tokens,
        labels,
    }
}

/// The labeling rule of a task, evaluated on content tokens only.
pub struct Labeler {
    num_classes: usize,
    content_vocab: usize,
    rule: Rule,
}

enum Rule {
    Teacher {
        body: Matrix,
        out: Matrix,
        bias: Vec<f64>,
        min_margin: f64,
    },
    Majority(Vec<u32>),
    Marker(u32),
}

impl Labeler {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let rule = match &spec.family {
            Family::Teacher { body_seed, hidden } => {
                let mut body_rng = Rng::new(*body_seed);
                let body = normal_matrix(&mut body_rng, spec.content_vocab, *hidden, 2.0);
                let mut rng = Rng::new(spec.seed).fork(1);
                let out = normal_matrix(&mut rng, *hidden, spec.num_classes, 2.0);
                Rule::Teacher {
                    body,
                    out,
                    bias: vec![0.0; spec.num_classes],
                    min_margin: 0.0,
                }
            }
            Family::Majority { candidates } => Rule::Majority(candidates.clone()),
            Family::MarkerCount { marker } => Rule::Marker(*marker),
        };
        let mut labeler = Self {
            num_classes: spec.num_classes,
            content_vocab: spec.content_vocab,
            rule,
        };
        labeler.calibrate(spec);
        Ok(labeler)
    }

    /// Shifts teacher biases until classes are roughly equally likely under
    /// the task's input distribution, then sets the margin below which an
    /// input counts as ambiguous.
    fn calibrate(&mut self, spec: &TaskSpec) {
        if !matches!(self.rule, Rule::Teacher { .. }) {
            return;
        }
        let mut rng = Rng::new(spec.seed).fork(2);
        let sampler = ContentSampler::new(spec);
        let probe: Vec<Vec<f64>> = (0..2000)
            .map(|_| self.teacher_logits(&sampler.sample(&mut rng)))
            .collect();
        let c = self.num_classes;
        for _ in 0..300 {
            let Rule::Teacher { bias, .. } = &mut self.rule else {
                unreachable!()
            };
            let mut freq = vec![0.0; c];
            for logits in &probe {
                freq[argmax_biased(logits, bias)] += 1.0 / probe.len() as f64;
            }
            for (b, f) in bias.iter_mut().zip(&freq) {
                *b -= 0.5 * (f - 1.0 / c as f64);
            }
        }
        let Rule::Teacher {
            bias, min_margin, ..
        } = &mut self.rule
        else {
            unreachable!()
        };
        let mut gaps: Vec<f64> = probe.iter().map(|l| margin(l, bias)).collect();
        gaps.sort_by(f64::total_cmp);
        *min_margin = gaps[(gaps.len() as f64 * TEACHER_AMBIGUOUS_SHARE) as usize];
    }

    fn teacher_logits(&self, content: &[u32]) -> Vec<f64> {
        let Rule::Teacher { body, out, .. } = &self.rule else {
            unreachable!()
        };
        let mut counts = vec![0.0; self.content_vocab];
        for &t in content {
            counts[t as usize] += 1.0 / content.len() as f64;
        }
        let hidden: Vec<f64> = (0..body.cols())
            .map(|j| {
                let s: f64 = counts
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * body.get(i, j))
                    .sum();
                (TEACHER_GAIN * s).tanh()
            })
            .collect();
        (0..out.cols())
            .map(|k| {
                hidden
                    .iter()
                    .enumerate()
                    .map(|(j, h)| h * out.get(j, k))
                    .sum()
            })
            .collect()
    }

    /// Label for a content sequence, or `None` when the rule is ambiguous.
    pub fn label(&self, content: &[u32]) -> Option<u32> {
        match &self.rule {
            Rule::Teacher {
                bias, min_margin, ..
            } => {
                let logits = self.teacher_logits(content);
                (margin(&logits, bias) >= *min_margin).then(|| argmax_biased(&logits, bias) as u32)
            }
            Rule::Majority(cands) => {
                let counts: Vec<usize> = cands
                    .iter()
                    .map(|c| content.iter().filter(|&&t| t == *c).count())
                    .collect();
                let best = *counts.iter().max()?;
                let mut winners = counts.iter().enumerate().filter(|(_, &n)| n == best);
                let (idx, _) = winners.next()?;
                if winners.next().is_some() {
                    None
                } else {
                    Some(idx as u32)
                }
            }
            Rule::Marker(m) => {
                let n = content.iter().filter(|&&t| t == *m).count();
                Some(n.min(self.num_classes - 1) as u32)
            }
        }
    }
}

/// Share of teacher inputs, by smallest top-two margin, treated as
/// ambiguous and never sampled.
const TEACHER_AMBIGUOUS_SHARE: f64 = 0.5;

/// Pre-activation gain of the teacher body; small values keep it close to
/// linear in the token counts.
const TEACHER_GAIN: f64 = 1.0;

/// Gap between the best and second-best biased logit.
fn margin(logits: &[f64], bias: &[f64]) -> f64 {
    let mut shifted: Vec<f64> = logits.iter().zip(bias).map(|(l, b)| l + b).collect();
    shifted.sort_by(|a, b| b.total_cmp(a));
    shifted[0] - shifted.get(1).copied().unwrap_or(f64::NEG_INFINITY)
}

fn argmax_biased(logits: &[f64], bias: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..logits.len() {
        if logits[k] + bias[k] > logits[best] + bias[best] {
            best = k;
        }
    }
    best
}

fn normal_matrix(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
    let data = (0..r * c).map(|_| rng.normal() * scale).collect();
    Matrix::from_vec(r, c, data).expect("sized by construction")
}

/// Draws content tokens from the task's input distribution.
struct ContentSampler {
    cumulative: Vec<f64>,
    len: usize,
}

impl ContentSampler {
    fn new(spec: &TaskSpec) -> Self {
        let mut rng = Rng::new(spec.seed).fork(3);
        let mut weights: Vec<f64> = (0..spec.content_vocab)
            .map(|_| (spec.input_skew * rng.normal()).exp())
            .collect();
        // Rules that key on specific tokens see them more often, otherwise
        // most draws would be ties or all-zero counts.
        let boost = match &spec.family {
            Family::Majority { candidates } => candidates.clone(),
            Family::MarkerCount { marker } => vec![*marker],
            Family::Teacher { .. } => vec![],
        };
        let total: f64 = weights.iter().sum();
        for &b in &boost {
            weights[b as usize] += total
                * match &spec.family {
                    Family::Majority { .. } => 0.6 / boost.len() as f64,
                    _ => 0.25,
                };
        }
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self {
            cumulative,
            len: spec.seq_len - 1,
        }
    }

    fn sample(&self, rng: &mut Rng) -> Vec<u32> {
        (0..self.len)
            .map(|_| {
                let u = rng.uniform();
                self.cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(self.cumulative.len() - 1) as u32
            })
            .collect()
    }
}

/// Generates a dataset with exactly balanced classes (up to one example)
/// and no input shared between or within splits.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    let labeler = Labeler::new(spec)?;
    let sampler = ContentSampler::new(spec);
    let mut rng = Rng::new(spec.seed).fork(4);
    let total = spec.total_size();
    let c = spec.num_classes;
    let quota = total.div_ceil(c);
    let mut per_class: Vec<Vec<Example>> = vec![Vec::new(); c];
    let mut seen = HashSet::new();
    let budget = 500 * total;
    let mut filled = 0;
    for _ in 0..budget {
        if filled == c * quota {
            break;
        }
        let content = sampler.sample(&mut rng);
        let Some(label) = labeler.label(&content) else {
            continue;
        };
        let bucket = &mut per_class[label as usize];
        if bucket.len() >= quota || !seen.insert(content.clone()) {
            continue;
        }
        let mut tokens = Vec::with_capacity(spec.seq_len);
        tokens.push(spec.task_token());
        tokens.extend(content);
        bucket.push(Example { tokens, label });
        filled += 1;
    }
    if filled < c * quota {
        return Err(Error::Input(format!(
            "task {}: could not fill balanced classes ({filled} of {} examples)",
            spec.id,
            c * quota
        )));
    }
    // Interleave classes, then shuffle, so any prefix stays near balanced.
    let mut pool: Vec<Example> = Vec::with_capacity(total);
    for i in 0..quota {
        for bucket in &per_class {
            pool.push(bucket[i].clone());
        }
    }
    pool.truncate(total);
    rng.shuffle(&mut pool);
    let test = pool.split_off(spec.train_size + spec.val_size);
    let val = pool.split_off(spec.train_size);
    Ok(Dataset {
        spec: spec.clone(),
        train: pool,
        val,
        test,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub n_held_in: usize,
    pub n_held_out: usize,
    pub num_classes: usize,
    pub content_vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub teacher_hidden: usize,
    pub input_skew: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_held_in: 8,
            n_held_out: 4,
            num_classes: 4,
            content_vocab: 16,
            seq_len: 8,
            train_size: 800,
            val_size: 200,
            test_size: 200,
            teacher_hidden: 16,
            input_skew: 0.3,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    /// Vocabulary needed by a model that reads this suite.
    pub fn vocab_size(&self) -> usize {
        self.content_vocab + self.n_held_in + self.n_held_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub held_in: Vec<Dataset>,
    pub held_out: Vec<Dataset>,
}

impl Suite {
    pub fn all(&self) -> impl Iterator<Item = &Dataset> {
        self.held_in.iter().chain(&self.held_out)
    }
}

/// Fraction of probe inputs on which two labelers agree (ambiguous inputs
/// count as disagreement).
pub fn label_agreement(a: &Labeler, b: &Labeler, probe: &[Vec<u32>]) -> f64 {
    let same = probe
        .iter()
        .filter(|x| matches!((a.label(x), b.label(x)), (Some(p), Some(q)) if p == q))
        .count();
    same as f64 / probe.len().max(1) as f64
}

/// Maximum pairwise agreement for a distinct suite.
pub const MAX_AGREEMENT: f64 = 0.8;

/// Builds held-in and held-out task lists. Families rotate through teacher,
/// majority and marker-count rules; parameters are drawn without reuse, so
/// held-out tasks never repeat a held-in parameterization, and any task
/// agreeing with an earlier one on at least 80% of probe inputs is redrawn.
pub fn build_suite(cfg: &SuiteConfig) -> Result<Suite> {
    build_suite_gated(cfg, &mut |_| Ok(true))
}

/// Like [`build_suite`], but every held-in task must pass `accept`;
/// rejected tasks are redrawn and their parameters are not used again.
pub fn build_suite_gated(
    cfg: &SuiteConfig,
    accept: &mut dyn FnMut(&Dataset) -> Result<bool>,
) -> Result<Suite> {
    if cfg.n_held_in == 0 || cfg.n_held_out == 0 {
        return Err(Error::Input(
            "suite needs at least one held-in and one held-out task".into(),
        ));
    }
    let root = Rng::new(cfg.seed);
    let mut param_rng = root.fork(100);
    let body_seed = root.fork(101).next_u64();
    let probe_spec = TaskSpec {
        id: "probe".into(),
        slot: 0,
        family: Family::Teacher {
            body_seed,
            hidden: cfg.teacher_hidden.max(1),
        },
        num_classes: cfg.num_classes,
        content_vocab: cfg.content_vocab,
        seq_len: cfg.seq_len,
        input_skew: 0.0,
        train_size: 1,
        val_size: 1,
        test_size: 1,
        seed: 0,
    };
    let probe_sampler = ContentSampler::new(&probe_spec);
    let mut probe_rng = root.fork(102);
    let probe: Vec<Vec<u32>> = (0..1000)
        .map(|_| probe_sampler.sample(&mut probe_rng))
        .collect();

    let mut used_params: HashSet<Vec<u32>> = HashSet::new();
    let mut seeds: HashSet<u64> = HashSet::new();
    let mut labelers: Vec<Labeler> = Vec::new();
    let mut held_in = Vec::new();
    let mut held_out = Vec::new();
    let n = cfg.n_held_in + cfg.n_held_out;
    let mut attempts = 0;
    let mut slot = 0;
    while slot < n {
        attempts += 1;
        if attempts > 50 * n {
            return Err(Error::Input("could not draw a distinct task suite".into()));
        }
        let family = match (slot + attempts) % 3 {
            0 => Family::Teacher {
                body_seed,
                hidden: cfg.teacher_hidden,
            },
            1 => {
                let idx = param_rng.sample_indices(cfg.content_vocab, cfg.num_classes);
                Family::Majority {
                    candidates: idx.into_iter().map(|i| i as u32).collect(),
                }
            }
            _ => Family::MarkerCount {
                marker: param_rng.below(cfg.content_vocab) as u32,
            },
        };
        let key = match &family {
            Family::Teacher { .. } => vec![],
            Family::Majority { candidates } => {
                let mut k = candidates.clone();
                k.push(u32::MAX);
                k
            }
            Family::MarkerCount { marker } => vec![*marker],
        };
        if !key.is_empty() && used_params.contains(&key) {
            continue;
        }
        let seed = param_rng.next_u64();
        if !seeds.insert(seed) {
            continue;
        }
        let held_out_task = slot >= cfg.n_held_in;
        let id = if held_out_task {
            format!("out{:02}-{}", slot - cfg.n_held_in, family.name())
        } else {
            format!("in{slot:02}-{}", family.name())
        };
        let spec = TaskSpec {
            id,
            slot,
            family,
            num_classes: cfg.num_classes,
            content_vocab: cfg.content_vocab,
            seq_len: cfg.seq_len,
            input_skew: cfg.input_skew,
            train_size: cfg.train_size,
            val_size: cfg.val_size,
            test_size: cfg.test_size,
            seed,
        };
        let labeler = Labeler::new(&spec)?;
        if labelers
            .iter()
            .any(|l| label_agreement(l, &labeler, &probe) >= MAX_AGREEMENT)
        {
            continue;
        }
        let Ok(data) = generate_task(&spec) else {
            continue;
        };
        if !key.is_empty() {
            used_params.insert(key);
        }
        if !held_out_task && !accept(&data)? {
            continue;
        }
        labelers.push(labeler);
        if held_out_task {
            held_out.push(data);
        } else {
            held_in.push(data);
        }
        slot += 1;
    }
    Ok(Suite { held_in, held_out })
}

/// Writes a dataset as text: one header line, then one row per example
/// (tokens then label, space separated) in train, val, test order.
pub fn write_dataset(data: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    let s = &data.spec;
    writeln!(
        out,
        "# task={} family={} slot={} classes={} seq_len={} train={} val={} test={} seed={}",
        s.id,
        s.family.name(),
        s.slot,
        s.num_classes,
        s.seq_len,
        data.train.len(),
        data.val.len(),
        data.test.len(),
        s.seed
    )?;
    let mut line = String::new();
    for ex in data.train.iter().chain(&data.val).chain(&data.test) {
        line.clear();
        for t in &ex.tokens {
            let _ = write!(line, "{t} ");
        }
        let _ = write!(line, "{}", ex.label);
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Splits read back from the text format.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub task_id: String,
    pub seed: u64,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn read_dataset(input: impl BufRead) -> Result<DatasetRecord> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Input("empty dataset file".into()))?
        .map_err(|e| Error::io("<dataset>", e))?;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::Input("dataset header must start with '# '".into()))?;
    let field = |key: &str| -> Result<&str> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Input(format!("dataset header lacks {key}")))
    };
    let num = |key: &str| -> Result<u64> {
        field(key)?
            .parse()
            .map_err(|_| Error::Input(format!("dataset header field {key} is not a number")))
    };
    let (n_train, n_val, n_test) = (
        num("train")? as usize,
        num("val")? as usize,
        num("test")? as usize,
    );
    let mut rows = Vec::with_capacity(n_train + n_val + n_test);
    for line in lines {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<u32> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Input(format!("bad dataset row {line:?}")))
            })
            .collect::<Result<_>>()?;
        let (label, tokens) = nums
            .split_last()
            .ok_or_else(|| Error::Input("empty dataset row".into()))?;
        rows.push(Example {
            tokens: tokens.to_vec(),
            label: *label,
        });
    }
    if rows.len() != n_train + n_val + n_test {
        return Err(Error::Input(format!(
            "dataset header announces {} rows, found {}",
            n_train + n_val + n_test,
            rows.len()
        )));
    }
    let test = rows.split_off(n_train + n_val);
    let val = rows.split_off(n_train);
    Ok(DatasetRecord {
        task_id: field("task")?.to_string(),
        seed: num("seed")?,
        train: rows,
        val,
        test,
    })
}
