//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero when any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

use spadapt::adapter_file::{decode, encode, read_file, AdapterFile};
use spadapt::harness::{run_bundle, sparse_label, BundleReport, DeskConfig};
use spadapt::merging::{
    breadcrumbs, merge, merge_sparse, merge_uniform, task_arithmetic, ties, Expert, MergeMethod,
    MergeSpec, Merged, TaskVector,
};
use spadapt::model::{
    build_model, loss_and_grads, AdaptTarget, Batch, LayerKind, LoraAdapter, LoraLayer, Model,
    ModelConfig, ParamId, Site, WeightDelta,
};
use spadapt::numerics::{Matrix, Rng};
use spadapt::saliency::{
    block_count, block_mask, layer_drop, topk_mask, Criterion, MaskKind, ScoreField, ScoreKind,
    SparseMask,
};
use spadapt::taskgen::build_suite;
use spadapt::trainer::{
    train_sparse, train_sparse_observed, Adapter, AdapterLayer, TrainConfig, TrainObserver,
    UpdateEvent,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.normal() * scale).collect(),
    )
    .unwrap()
}

// Gradients against central differences.

const FD_STEP: f64 = 1e-4;
const FD_TOLERANCE: f64 = 1e-4;

fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(shape: (usize, usize), mut loss_at: impl FnMut(usize, f64) -> f64) -> Matrix {
    let mut g = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.len() {
        g.data_mut()[i] = (loss_at(i, FD_STEP) - loss_at(i, -FD_STEP)) / (2.0 * FD_STEP);
    }
    g
}

fn gradient_case(seed: u64) -> Result<f64, String> {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        vocab_size: 9,
        num_classes: 3,
        seq_len: 4,
        mlp_ratio: 2,
        adapt_targets: vec![AdaptTarget::Qkv, AdaptTarget::O, AdaptTarget::Mlp],
    };
    let mut rng = Rng::new(seed);
    let model = build_model(cfg.clone(), &mut rng.fork(1)).map_err(err)?;
    let batch = Batch {
        seq_len: cfg.seq_len,
        tokens: (0..3 * cfg.seq_len)
            .map(|_| rng.below(cfg.vocab_size))
            .collect(),
        labels: (0..3).map(|_| rng.below(cfg.num_classes)).collect(),
    };
    let sites = cfg.adapted_sites();

    let mut sparse = Adapter::fresh(&model, &TrainConfig::default(), "fd");
    for site in &sites {
        let (r, c) = cfg.site_shape(*site);
        let mask = topk_mask(
            &ScoreField::new(ScoreKind::Mcs, random_matrix(&mut rng, r, c, 1.0)),
            0.5,
        )
        .map_err(err)?;
        sparse.layers.insert(
            *site,
            AdapterLayer {
                values: random_matrix(&mut rng, r, c, 0.3),
                mask,
            },
        );
    }
    let lora = LoraAdapter {
        task_id: "fd".into(),
        rank: 2,
        alpha: 3.0,
        layers: sites
            .iter()
            .map(|s| {
                let (r, c) = cfg.site_shape(*s);
                (
                    *s,
                    LoraLayer {
                        a: random_matrix(&mut rng, r, 2, 0.3),
                        b: random_matrix(&mut rng, 2, c, 0.3),
                    },
                )
            })
            .collect(),
    };

    let loss = |m: &Model, d: &dyn WeightDelta| {
        loss_and_grads(m, d, &batch, &[])
            .map(|(l, _)| l)
            .expect("finite loss")
    };
    let mut worst: f64 = 0.0;

    // Base weights of every layer type, seen through the sparse adapter.
    let base_params: Vec<ParamId> = cfg.all_sites().into_iter().map(ParamId::Base).collect();
    let (_, grads) = loss_and_grads(&model, &sparse, &batch, &base_params).map_err(err)?;
    for p in &base_params {
        let ParamId::Base(site) = *p else {
            unreachable!()
        };
        let w = model.weight(site).map_err(err)?.clone();
        let fd = numeric_grad(w.shape(), |i, h| {
            let mut w2 = w.clone();
            w2.data_mut()[i] += h;
            loss(
                &model.with_weights(BTreeMap::from([(site, w2)])).unwrap(),
                &sparse,
            )
        });
        let e = rel_error(&grads[p], &fd);
        check(e < FD_TOLERANCE, || {
            format!("seed {seed}: base {site} relative error {e:.2e}")
        })?;
        worst = worst.max(e);
    }

    // Masked sparse delta values.
    let delta_params: Vec<ParamId> = sites.iter().map(|s| ParamId::Delta(*s)).collect();
    let (_, grads) = loss_and_grads(&model, &sparse, &batch, &delta_params).map_err(err)?;
    for p in &delta_params {
        let ParamId::Delta(site) = *p else {
            unreachable!()
        };
        let fd = numeric_grad(sparse.layers[&site].values.shape(), |i, h| {
            let mut a = sparse.clone();
            a.layers.get_mut(&site).unwrap().values.data_mut()[i] += h;
            loss(&model, &a)
        });
        let e = rel_error(&grads[p], &fd);
        check(e < FD_TOLERANCE, || {
            format!("seed {seed}: sparse delta {site} relative error {e:.2e}")
        })?;
        worst = worst.max(e);
    }

    // Dense delta.
    let dense = TaskVector::from_adapter(&sparse);
    let (_, grads) = loss_and_grads(&model, &dense, &batch, &delta_params).map_err(err)?;
    for p in &delta_params {
        let ParamId::Delta(site) = *p else {
            unreachable!()
        };
        let fd = numeric_grad(dense.layers[&site].shape(), |i, h| {
            let mut t = dense.clone();
            t.layers.get_mut(&site).unwrap().data_mut()[i] += h;
            loss(&model, &t)
        });
        let e = rel_error(&grads[p], &fd);
        check(e < FD_TOLERANCE, || {
            format!("seed {seed}: dense delta {site} relative error {e:.2e}")
        })?;
        worst = worst.max(e);
    }

    // Low-rank factors.
    let lora_params: Vec<ParamId> = sites
        .iter()
        .flat_map(|s| [ParamId::LoraA(*s), ParamId::LoraB(*s)])
        .collect();
    let (_, grads) = loss_and_grads(&model, &lora, &batch, &lora_params).map_err(err)?;
    for p in &lora_params {
        let (site, is_a) = match *p {
            ParamId::LoraA(s) => (s, true),
            ParamId::LoraB(s) => (s, false),
            _ => unreachable!(),
        };
        let shape = if is_a {
            lora.layers[&site].a.shape()
        } else {
            lora.layers[&site].b.shape()
        };
        let fd = numeric_grad(shape, |i, h| {
            let mut l = lora.clone();
            let layer = l.layers.get_mut(&site).unwrap();
            let m = if is_a { &mut layer.a } else { &mut layer.b };
            m.data_mut()[i] += h;
            loss(&model, &l)
        });
        let e = rel_error(&grads[p], &fd);
        check(e < FD_TOLERANCE, || {
            format!("seed {seed}: lora {:?} relative error {e:.2e}", p)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        worst = worst.max(gradient_case(seed)?);
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(30), || {
        format!("took {took:?}, limit 30 s")
    })?;
    Ok(format!(
        "20 seeds, all layer types, worst relative error {worst:.2e}, {:.1} s",
        took.as_secs_f64()
    ))
}

// Mask contracts.

fn criterion_masks() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut block_cases = 0;
    for case in 0..100 {
        let rows = 1 + rng.below(24);
        let cols = 1 + rng.below(24);
        let per_mille = 1 + rng.below(1000);
        let kr = per_mille as f64 / 1000.0;
        let n = rows * cols;
        // Ties are likely with coarse scores, exercising the tie rule.
        let scores = Matrix::from_vec(
            rows,
            cols,
            (0..n).map(|_| (rng.below(7) as f64) - 3.0).collect(),
        )
        .unwrap();
        let field = ScoreField::new(ScoreKind::Mcs, scores.clone());
        let mask = topk_mask(&field, kr).map_err(err)?;
        let expected_k = (per_mille * n / 1000).max(1);
        check(mask.len() == expected_k, || {
            format!(
                "case {case}: {rows}x{cols} kr {kr}: {} entries, expected {expected_k}",
                mask.len()
            )
        })?;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores.data()[b]
                .partial_cmp(&scores.data()[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut oracle: Vec<(u32, u32)> = order[..expected_k]
            .iter()
            .map(|&i| ((i / cols) as u32, (i % cols) as u32))
            .collect();
        oracle.sort();
        check(mask.sorted_entries() == oracle, || {
            format!("case {case}: top-k differs from full-sort oracle")
        })?;

        for b in [2usize, 3, 4] {
            if !rows.is_multiple_of(b) || !cols.is_multiple_of(b) {
                continue;
            }
            let nb = per_mille * n / (1000 * b * b);
            check(block_count(kr, rows, cols, b) == nb, || {
                format!("case {case}: block count")
            })?;
            match block_mask(&field, kr, b) {
                Err(_) if nb == 0 => continue,
                Err(e) => return Err(format!("case {case}: {e}")),
                Ok(_) if nb == 0 => return Err(format!("case {case}: zero blocks accepted")),
                Ok(m) => {
                    block_cases += 1;
                    let MaskKind::Block { size, blocks } = m.kind() else {
                        return Err(format!("case {case}: not a block mask"));
                    };
                    check(*size as usize == b && blocks.len() == nb, || {
                        format!("case {case}: {} blocks, expected {nb}", blocks.len())
                    })?;
                    check(m.len() == nb * b * b, || {
                        format!("case {case}: block mask size")
                    })?;
                    let mut cover = vec![0u8; n];
                    for (r, c) in m.entries() {
                        cover[r * cols + c] += 1;
                    }
                    check(cover.iter().all(|&x| x <= 1), || {
                        format!("case {case}: overlapping blocks")
                    })?;
                    for &(br, bc) in blocks {
                        for r in 0..b {
                            for c in 0..b {
                                let i = (br as usize * b + r) * cols + bc as usize * b + c;
                                check(cover[i] == 1, || {
                                    format!("case {case}: block not grid aligned")
                                })?;
                            }
                        }
                    }
                    // Exhaustive block ranking by summed score.
                    let (gr, gc) = (rows / b, cols / b);
                    let sums: Vec<f64> = (0..gr * gc)
                        .map(|k| {
                            let (br, bc) = (k / gc, k % gc);
                            (0..b * b)
                                .map(|j| scores.get(br * b + j / b, bc * b + j % b))
                                .sum()
                        })
                        .collect();
                    let mut idx: Vec<usize> = (0..gr * gc).collect();
                    idx.sort_by(|&x, &y| sums[y].partial_cmp(&sums[x]).unwrap().then(x.cmp(&y)));
                    let mut want: Vec<(u32, u32)> = idx[..nb]
                        .iter()
                        .map(|&k| ((k / gc) as u32, (k % gc) as u32))
                        .collect();
                    want.sort();
                    check(*blocks == want, || {
                        format!("case {case}: blocks differ from exhaustive ranking")
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "100 random (shape, kr) pairs, {block_cases} block masks checked"
    ))
}

// Overlap-weighted sparse merge.

fn random_adapter(
    rng: &mut Rng,
    id: &str,
    sites: &[Site],
    shape: (usize, usize),
    dyadic: bool,
) -> Adapter {
    let layers = sites
        .iter()
        .map(|s| {
            let kr = 0.1 + 0.8 * rng.uniform();
            let mask = topk_mask(
                &ScoreField::new(ScoreKind::Mcs, random_matrix(rng, shape.0, shape.1, 1.0)),
                kr,
            )
            .unwrap();
            let mut values = Matrix::zeros(shape.0, shape.1);
            for (r, c) in mask.entries() {
                let v = if dyadic {
                    (rng.below(2001) as f64 - 1000.0) / 1024.0
                } else {
                    rng.normal() * 10f64.powi(rng.below(9) as i32 - 4)
                };
                values.set(r, c, v);
            }
            (*s, AdapterLayer { values, mask })
        })
        .collect();
    Adapter {
        task_id: id.into(),
        layers,
        config: TrainConfig::default(),
        train_loss: f64::NAN,
        val_loss: f64::NAN,
    }
}

fn criterion_sparse_merge() -> Outcome {
    let mut rng = Rng::new(7);
    let sites = [
        Site::block(0, LayerKind::Qkv),
        Site::block(1, LayerKind::Qkv),
    ];
    let mut cases = 0;
    for trial in 0..200 {
        let n = 1 + rng.below(5);
        let dyadic = trial % 2 == 0;
        let adapters: Vec<Adapter> = (0..n)
            .map(|i| random_adapter(&mut rng, &format!("t{i}"), &sites, (8, 8), dyadic))
            .collect();
        let refs: Vec<&Adapter> = adapters.iter().collect();
        let merged = merge_sparse(&refs).map_err(err)?;
        for site in &sites {
            for r in 0..8 {
                for c in 0..8 {
                    let covering: Vec<f64> = adapters
                        .iter()
                        .filter(|a| a.layers[site].mask.contains(r, c))
                        .map(|a| a.layers[site].values.get(r, c))
                        .collect();
                    let overlap = covering.len().max(1);
                    let got = merged.layers[site].values.get(r, c);
                    // Scalar loop; exact for dyadic inputs.
                    let mut total = 0.0;
                    for v in &covering {
                        total += v;
                    }
                    let looped = total / overlap as f64;
                    // Exact rational value of the same formula, rounded once.
                    let sum = covering
                        .iter()
                        .fold(BigRational::zero(), |acc, v| acc + exact(*v));
                    let rational = (sum / BigRational::from_integer(overlap.into()))
                        .to_f64()
                        .unwrap();
                    check(
                        got.to_bits() == rational.to_bits() || (got == 0.0 && rational == 0.0),
                        || format!("trial {trial} {site} ({r},{c}): {got:e} vs exact {rational:e}"),
                    )?;
                    if dyadic {
                        check(got == looped, || {
                            format!("trial {trial}: {got:e} vs scalar loop {looped:e}")
                        })?;
                    }
                    check(
                        merged.layers[site].mask.contains(r, c) == !covering.is_empty(),
                        || format!("trial {trial}: union mask"),
                    )?;
                    cases += 1;
                }
            }
        }

        // Idempotence: merging copies of one adapter returns it bitwise.
        let copies: Vec<&Adapter> = std::iter::repeat_n(&adapters[0], n).collect();
        let same = merge_sparse(&copies).map_err(err)?;
        for site in &sites {
            check(
                same.layers[site]
                    .values
                    .bit_eq(&adapters[0].layers[site].values),
                || format!("trial {trial}: idempotence"),
            )?;
            check(
                same.layers[site].mask == adapters[0].layers[site].mask,
                || format!("trial {trial}: idempotent mask"),
            )?;
        }
    }

    // Disjoint supports keep every value unchanged.
    for trial in 0..50 {
        let n = 2 + rng.below(4);
        let mut owner = vec![usize::MAX; 64];
        for slot in owner.iter_mut() {
            if rng.uniform() < 0.7 {
                *slot = rng.below(n);
            }
        }
        let adapters: Vec<Adapter> = (0..n)
            .map(|i| {
                let coords: Vec<(u32, u32)> = (0..64)
                    .filter(|&k| owner[k] == i)
                    .map(|k| ((k / 8) as u32, (k % 8) as u32))
                    .collect();
                let mut values = Matrix::zeros(8, 8);
                for &(r, c) in &coords {
                    values.set(r as usize, c as usize, rng.normal());
                }
                let mask = if coords.is_empty() {
                    SparseMask::empty(8, 8)
                } else {
                    SparseMask::from_elements(8, 8, coords).unwrap()
                };
                Adapter {
                    task_id: format!("d{i}"),
                    layers: BTreeMap::from([(sites[0], AdapterLayer { values, mask })]),
                    config: TrainConfig::default(),
                    train_loss: f64::NAN,
                    val_loss: f64::NAN,
                }
            })
            .collect();
        let merged = merge_sparse(&adapters.iter().collect::<Vec<_>>()).map_err(err)?;
        let sum = adapters.iter().fold(Matrix::zeros(8, 8), |acc, a| {
            acc.add(&a.layers[&sites[0]].values).unwrap()
        });
        check(merged.layers[&sites[0]].values.bit_eq(&sum), || {
            format!("disjoint trial {trial}")
        })?;
    }
    Ok(format!(
        "{cases} coordinates match the exact reference; idempotence and disjointness hold"
    ))
}

// TIES, Breadcrumbs and uniform averaging.

fn vec_tv(id: &str, v: &[f64]) -> TaskVector {
    TaskVector {
        task_id: id.into(),
        layers: BTreeMap::from([(
            Site::block(0, LayerKind::Qkv),
            Matrix::from_vec(1, v.len(), v.to_vec()).unwrap(),
        )]),
    }
}

fn out_values(t: &TaskVector) -> Vec<f64> {
    t.layers.values().next().unwrap().data().to_vec()
}

fn ties_reference(vectors: &[Vec<f64>], lambda: f64, trim: f64) -> Vec<f64> {
    let n = vectors[0].len();
    let k = ((trim * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    let trimmed: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
            let mut out = vec![0.0; n];
            for &i in &order[..k] {
                out[i] = v[i];
            }
            out
        })
        .collect();
    (0..n)
        .map(|i| {
            let total = trimmed
                .iter()
                .fold(BigRational::zero(), |acc, t| acc + exact(t[i]));
            let positive = !total.is_negative();
            let agree: Vec<f64> = trimmed
                .iter()
                .map(|t| t[i])
                .filter(|&x| x != 0.0 && (x > 0.0) == positive)
                .collect();
            if agree.is_empty() {
                return 0.0;
            }
            let mean = agree
                .iter()
                .fold(BigRational::zero(), |acc, x| acc + exact(*x))
                / BigRational::from_integer(agree.len().into());
            lambda * mean.to_f64().unwrap()
        })
        .collect()
}

fn breadcrumbs_reference(vectors: &[Vec<f64>], lambda: f64, top: f64, bottom: f64) -> Vec<f64> {
    let n = vectors[0].len();
    let n_top = (top * n as f64 + 1e-9).floor() as usize;
    let n_bottom = (bottom * n as f64 + 1e-9).floor() as usize;
    let kept: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let mut ascending: Vec<usize> = (0..n).collect();
            ascending
                .sort_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap().then(a.cmp(&b)));
            let mut descending: Vec<usize> = (0..n).collect();
            descending
                .sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
            let mut out = v.clone();
            for &i in ascending[..n_bottom].iter().chain(&descending[..n_top]) {
                out[i] = 0.0;
            }
            out
        })
        .collect();
    (0..n)
        .map(|i| {
            lambda
                * kept
                    .iter()
                    .fold(BigRational::zero(), |acc, t| acc + exact(t[i]))
                    .to_f64()
                    .unwrap()
        })
        .collect()
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.to_bits() == y.to_bits() || (*x == 0.0 && *y == 0.0))
}

fn criterion_baselines() -> Outcome {
    let mut rng = Rng::new(99);
    for trial in 0..500 {
        let n_vec = 1 + rng.below(6);
        let vectors: Vec<Vec<f64>> = (0..n_vec)
            .map(|_| {
                (0..10)
                    .map(|_| {
                        if rng.uniform() < 0.15 {
                            0.0
                        } else {
                            (rng.below(9) as f64 - 4.0) * 0.25
                                + rng.normal() * 0.1 * (rng.below(2) as f64)
                        }
                    })
                    .collect()
            })
            .collect();
        let tvs: Vec<TaskVector> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| vec_tv(&format!("v{i}"), v))
            .collect();
        let refs: Vec<&TaskVector> = tvs.iter().collect();

        let trim = [0.1, 0.2, 0.35, 0.5, 1.0][rng.below(5)];
        let lambda = [1.0, 0.4, 0.7][rng.below(3)];
        let got = out_values(&ties(&refs, lambda, trim).map_err(err)?);
        let want = ties_reference(&vectors, lambda, trim);
        check(same_bits(&got, &want), || {
            format!("trial {trial}: ties {got:?} vs {want:?}")
        })?;

        let (top, bottom) = [(0.01, 0.85), (0.1, 0.3), (0.2, 0.5), (0.0, 0.0)][rng.below(4)];
        let got = out_values(&breadcrumbs(&refs, lambda, top, bottom).map_err(err)?);
        let want = breadcrumbs_reference(&vectors, lambda, top, bottom);
        check(same_bits(&got, &want), || {
            format!("trial {trial}: breadcrumbs {got:?} vs {want:?}")
        })?;

        let uniform = out_values(&merge_uniform(&refs).map_err(err)?);
        let ta = out_values(&task_arithmetic(&refs, 1.0 / n_vec as f64).map_err(err)?);
        check(
            uniform
                .iter()
                .zip(&ta)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("trial {trial}: uniform vs task arithmetic"),
        )?;
    }
    Ok("500 random 10-element cases match brute-force references; task_arithmetic(1/N) == uniform bitwise".into())
}

// Algorithm contract, instrumented.

#[derive(Default)]
struct Recorder {
    steps_per_epoch: BTreeMap<usize, usize>,
    refresh_steps: Vec<usize>,
    previous: HashMap<ParamId, Matrix>,
    /// (epoch, param, row, col) of every value change observed by diffing.
    changes: Vec<(usize, ParamId, usize, usize)>,
    outside_allowed: usize,
}

impl TrainObserver for Recorder {
    fn on_update(&mut self, e: &UpdateEvent<'_>) {
        *self.steps_per_epoch.entry(e.epoch).or_default() = e.global_step;
        let prev = self
            .previous
            .entry(e.param)
            .or_insert_with(|| Matrix::zeros(e.values.rows(), e.values.cols()));
        let cols = e.values.cols();
        for (i, (a, b)) in prev.data().iter().zip(e.values.data()).enumerate() {
            if a.to_bits() != b.to_bits() {
                self.changes.push((e.epoch, e.param, i / cols, i % cols));
                if e.allowed.is_some_and(|m| !m.contains(i / cols, i % cols)) {
                    self.outside_allowed += 1;
                }
            }
        }
        *prev = e.values.clone();
    }

    fn on_mask_refresh(&mut self, step: usize, adapter: &Adapter) {
        self.refresh_steps.push(step);
        // Refreshes may reset values; continue diffing from the new state.
        for (site, layer) in &adapter.layers {
            self.previous
                .insert(ParamId::Delta(*site), layer.values.clone());
        }
    }
}

fn criterion_algorithm() -> Outcome {
    let mut desk = DeskConfig::default();
    desk.suite.train_size = 320;
    let desk = desk.for_bundle(0);
    let model = build_model(desk.model.clone(), &mut Rng::new(desk.seed).fork(1)).map_err(err)?;
    let suite = build_suite(&desk.suite).map_err(err)?;
    let before = model.clone();
    let mut runs = 0;
    for (i, task) in suite.held_in.iter().take(3).enumerate() {
        for (criterion, block) in [
            (Criterion::Mcs, None),
            (Criterion::Gd, None),
            (Criterion::Cs, Some(4)),
        ] {
            let cfg = TrainConfig {
                criterion,
                block_size: block,
                epochs: 3,
                early_stopping: i != 0,
                seed: i as u64,
                ..desk.train.clone()
            };
            let mut rec = Recorder::default();
            let adapter = train_sparse_observed(&model, task, &cfg, &mut rec).map_err(err)?;
            runs += 1;
            let first_epoch_end = rec.steps_per_epoch[&1];
            check(
                !rec.refresh_steps.is_empty()
                    && rec.refresh_steps.iter().all(|&s| s <= first_epoch_end),
                || format!("{}: mask refreshed outside epoch 1", task.id()),
            )?;
            check(rec.outside_allowed == 0, || {
                format!(
                    "{}: {} updates outside the optimizer's mask",
                    task.id(),
                    rec.outside_allowed
                )
            })?;
            for &(epoch, param, r, c) in &rec.changes {
                let ParamId::Delta(site) = param else {
                    return Err(format!("unexpected parameter {param:?} updated"));
                };
                if epoch > 1 {
                    check(adapter.layers[&site].mask.contains(r, c), || {
                        format!(
                            "{}: epoch {epoch} updated ({r},{c}) of {site}, outside the final mask",
                            task.id()
                        )
                    })?;
                }
            }
            check(rec.changes.iter().any(|c| c.0 > 1), || {
                "no updates after epoch 1".into()
            })?;
            for (site, layer) in &adapter.layers {
                for i in 0..layer.values.len() {
                    let (r, c) = (i / layer.values.cols(), i % layer.values.cols());
                    check(
                        layer.mask.contains(r, c) || layer.values.data()[i].to_bits() == 0,
                        || {
                            format!(
                                "{}: nonzero value outside mask at {site} ({r},{c})",
                                task.id()
                            )
                        },
                    )?;
                }
            }
        }
    }
    check(model == before, || "base weights changed".into())?;
    for site in before.config().all_sites() {
        check(
            model
                .weight(site)
                .unwrap()
                .bit_eq(before.weight(site).unwrap()),
            || format!("base {site} changed"),
        )?;
    }
    Ok(format!("{runs} instrumented runs: no out-of-mask updates after epoch 1, zero outside final masks, base frozen"))
}

// Ordinal replication over seed bundles.

const BUNDLES: u64 = 10;
const BUNDLE_LIMIT: Duration = Duration::from_secs(15 * 60);

struct BundleRun {
    report: BundleReport,
    took: Duration,
}

fn run_bundles() -> Result<Vec<BundleRun>, String> {
    let base = DeskConfig::default();
    (0..BUNDLES)
        .map(|b| {
            let start = Instant::now();
            let report = run_bundle(&base.for_bundle(b)).map_err(|e| format!("bundle {b}: {e}"))?;
            let took = start.elapsed();
            let s = |m: &str| report.merged_score(m).unwrap_or(f64::NAN);
            let single = |m: &str| report.single_score(m).unwrap_or(f64::NAN);
            eprintln!(
                "  bundle {b}: {:.0} s, gate rejections {}; merged held-in: sparse-overlap {:.3} fft-uniform {:.3} multitask {:.3}; \
                 single: sparse 0.1 {:.3} sparse 0.5 {:.3} dense {:.3}",
                took.as_secs_f64(),
                report.gate_rejections,
                s("sparse-overlap"),
                s("fft-uniform"),
                s("multitask"),
                single(&sparse_label(0.1)),
                single(&sparse_label(0.5)),
                single("dense")
            );
            Ok(BundleRun { report, took })
        })
        .collect()
}

fn tally(
    runs: &[BundleRun],
    need: usize,
    what: &str,
    f: impl Fn(&BundleReport) -> bool,
) -> Outcome {
    let wins = runs.iter().filter(|r| f(&r.report)).count();
    let line = format!("{what}: {wins}/{} bundles (need {need})", runs.len());
    if wins >= need {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_table_pattern(runs: &[BundleRun]) -> Outcome {
    let slowest = runs.iter().map(|r| r.took).max().unwrap_or_default();
    let a = tally(runs, 7, "sparse-overlap >= fft-uniform held-in", |r| {
        r.merged_score("sparse-overlap").unwrap() >= r.merged_score("fft-uniform").unwrap()
    });
    let b = tally(runs, 9, "multitask >= every merged method held-in", |r| {
        let mt = r.merged_score("multitask").unwrap();
        r.merged
            .iter()
            .filter(|m| m.method != "multitask" && m.method != "base")
            .all(|m| mt >= m.held_in)
    });
    let time = format!("slowest bundle {:.0} s", slowest.as_secs_f64());
    let ok = a.is_ok() && b.is_ok() && slowest < BUNDLE_LIMIT;
    let text = format!(
        "{}; {}; {time}",
        a.unwrap_or_else(|e| e),
        b.unwrap_or_else(|e| e)
    );
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn criterion_keep_ratio_pattern(runs: &[BundleRun]) -> Outcome {
    tally(runs, 7, "sparse kr 0.1 and 0.5 >= dense", |r| {
        let dense = r.single_score("dense").unwrap();
        [0.1, 0.5]
            .iter()
            .all(|&kr| r.single_score(&sparse_label(kr)).unwrap() >= dense)
    })
}

fn criterion_decomposition(runs: &[BundleRun]) -> Outcome {
    for run in runs {
        for d in &run.report.decomposition {
            let (a, b, c) = (d.single as i64, d.masked_only as i64, d.full_merged as i64);
            check(
                a - c == (a - b) + (b - c) && d.total_gap() == d.masked_gap() + d.unmasked_gap(),
                || format!("{}: decomposition identity broken", d.task_id),
            )?;
        }
    }
    tally(
        runs,
        7,
        "single >= masked-only >= full-merged (means); identity exact per task",
        |r| {
            let n = r.decomposition.len() as f64;
            let mean = |f: &dyn Fn(&spadapt::harness::Decomposition) -> f64| {
                r.decomposition.iter().map(f).sum::<f64>() / n
            };
            let a = mean(&|d| d.accuracies().0);
            let b = mean(&|d| d.accuracies().1);
            let c = mean(&|d| d.accuracies().2);
            a >= b && b >= c
        },
    )
}

fn criterion_scaling(runs: &[BundleRun]) -> Outcome {
    tally(
        runs,
        7,
        "sparse-overlap >= fft-uniform at every N in {2,4,8}",
        |r| {
            let sparse = r.scaling.series("sparse-overlap").unwrap();
            let fft = r.scaling.series("fft-uniform").unwrap();
            sparse.points.len() == 3
                && sparse
                    .points
                    .iter()
                    .zip(&fft.points)
                    .all(|(s, f)| s.x == f.x && s.mean >= f.mean)
        },
    )
}

// Layer drop.

fn criterion_layer_drop() -> Outcome {
    let mut rng = Rng::new(5);
    for case in 0..200 {
        let layers = 1 + rng.below(6);
        let fields: Vec<ScoreField> = (0..layers)
            .map(|l| {
                let (r, c) = (1 + rng.below(6), 1 + rng.below(6));
                // Shift some layers down so that whole layers fall below the threshold.
                let shift = if l % 2 == 1 {
                    -2.0 * rng.uniform()
                } else {
                    0.0
                };
                let m = Matrix::from_vec(
                    r,
                    c,
                    (0..r * c)
                        .map(|_| (rng.normal() + shift) * 4.0)
                        .map(f64::round)
                        .collect(),
                )
                .unwrap();
                ScoreField::new(ScoreKind::Mcs, m)
            })
            .collect();
        let per_mille = 1 + rng.below(1000);
        let kr = per_mille as f64 / 1000.0;
        let got = layer_drop(&fields, kr).map_err(err)?;
        let mut all: Vec<f64> = fields
            .iter()
            .flat_map(|f| f.scores.data().to_vec())
            .collect();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = (per_mille * all.len() / 1000).max(1);
        let threshold = all[k - 1];
        let expect: Vec<bool> = fields
            .iter()
            .map(|f| {
                f.scores
                    .data()
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
                    >= threshold
            })
            .collect();
        check(got.threshold == threshold, || {
            format!("case {case}: threshold {} vs {threshold}", got.threshold)
        })?;
        check(got.active == expect, || {
            format!("case {case}: dropped layers differ")
        })?;
        let full = layer_drop(&fields, 1.0).map_err(err)?;
        check(full.active.iter().all(|a| *a), || {
            format!("case {case}: kr=1 dropped a layer")
        })?;
    }
    Ok("200 random cases match the concatenate-and-sort oracle; kr=1 drops nothing".into())
}

// Persistence.

fn random_expert(rng: &mut Rng, i: usize) -> Expert {
    let n_layers = 1 + rng.below(4);
    let sites: Vec<Site> = (0..n_layers)
        .map(|l| {
            Site::block(
                l,
                [
                    LayerKind::Qkv,
                    LayerKind::Out,
                    LayerKind::MlpUp,
                    LayerKind::MlpDown,
                ][rng.below(4)],
            )
        })
        .collect();
    let mut bits = || f64::from_bits(rng.next_u64());
    match i % 5 {
        0..=2 => {
            let block = (i % 5 == 2).then_some(2);
            let mut layers = BTreeMap::new();
            for s in &sites {
                let (r, c) = (2 * (1 + rng.below(5)), 2 * (1 + rng.below(5)));
                let kr = 0.05 + 0.95 * rng.uniform();
                let scores = ScoreField::new(ScoreKind::Mcs, random_matrix(rng, r, c, 1.0));
                let mask = match block {
                    Some(b) if block_count(kr, r, c, b) >= 1 => block_mask(&scores, kr, b).unwrap(),
                    _ => topk_mask(&scores, kr).unwrap(),
                };
                let mut values = Matrix::zeros(r, c);
                for (rr, cc) in mask.entries() {
                    values.set(rr, cc, f64::from_bits(rng.next_u64()));
                }
                layers.insert(*s, AdapterLayer { values, mask });
            }
            let config = TrainConfig {
                kr: (1 + rng.below(1000)) as f64 / 1000.0,
                criterion: Criterion::ALL[rng.below(5)],
                block_size: block,
                seed: rng.next_u64(),
                learning_rate: rng.uniform() * 0.1 + 1e-6,
                max_mask_refreshes: (rng.below(2) == 1).then_some(1 + rng.below(4)),
                ..TrainConfig::default()
            };
            Expert::Sparse(Adapter {
                task_id: format!("task-{i}-ü"),
                layers,
                config,
                train_loss: rng.uniform(),
                val_loss: if i.is_multiple_of(7) {
                    f64::NAN
                } else {
                    rng.uniform()
                },
            })
        }
        3 => Expert::Dense(TaskVector {
            task_id: format!("dense-{i}"),
            layers: sites
                .iter()
                .map(|s| {
                    (
                        *s,
                        Matrix::from_vec(3, 2, (0..6).map(|_| bits()).collect()).unwrap(),
                    )
                })
                .collect(),
        }),
        _ => Expert::Lora(LoraAdapter {
            task_id: format!("lora-{i}"),
            rank: 2,
            alpha: 4.0,
            layers: sites
                .iter()
                .map(|s| {
                    (
                        *s,
                        LoraLayer {
                            a: Matrix::from_vec(
                                3,
                                2,
                                (0..6).map(|_| f64::from_bits(rng.next_u64())).collect(),
                            )
                            .unwrap(),
                            b: Matrix::from_vec(
                                2,
                                5,
                                (0..10).map(|_| f64::from_bits(rng.next_u64())).collect(),
                            )
                            .unwrap(),
                        },
                    )
                })
                .collect(),
        }),
    }
}

fn expert_bits(e: &Expert) -> Vec<u64> {
    let mats: Vec<&Matrix> = match e {
        Expert::Sparse(a) => a.layers.values().map(|l| &l.values).collect(),
        Expert::Dense(t) => t.layers.values().collect(),
        Expert::Lora(l) => l.layers.values().flat_map(|x| [&x.a, &x.b]).collect(),
    };
    mats.iter()
        .flat_map(|m| m.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn sadp_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "sadp"))
        .collect();
    v.sort();
    v
}

fn criterion_persistence() -> Outcome {
    let mut rng = Rng::new(31337);
    for i in 0..100 {
        let expert = random_expert(&mut rng, i);
        let file = AdapterFile {
            expert,
            provenance: (0..rng.below(3)).map(|k| [k as u8 ^ i as u8; 32]).collect(),
        };
        let bytes = encode(&file).map_err(err)?;
        let back = decode(&bytes).map_err(|e| format!("adapter {i}: {e}"))?;
        check(
            expert_bits(&file.expert) == expert_bits(&back.expert),
            || format!("adapter {i}: values changed"),
        )?;
        check(encode(&back).map_err(err)? == bytes, || {
            format!("adapter {i}: re-encoding differs")
        })?;
        check(back.provenance == file.provenance, || {
            format!("adapter {i}: provenance")
        })?;
        if let (Expert::Sparse(a), Expert::Sparse(b)) = (&file.expert, &back.expert) {
            check(a.config == b.config && a.task_id == b.task_id, || {
                format!("adapter {i}: metadata")
            })?;
            for (s, l) in &a.layers {
                check(l.mask == b.layers[s].mask, || format!("adapter {i}: mask"))?;
            }
        }
    }

    // End to end: the CLI trains and merges the 8 desk adapters; the library
    // trains and merges them in process.
    let dir = tempfile::tempdir().map_err(err)?;
    let exe = env!("CARGO_BIN_EXE_spadapt");
    let out = dir.path().join("experts");
    let status = Command::new(exe)
        .args(["train", "--seed", "17", "--out-dir", out.to_str().unwrap()])
        .status()
        .map_err(err)?;
    check(status.success(), || {
        format!("cli train exited with {status}")
    })?;
    let inputs = sadp_files(&out);
    check(inputs.len() == 8, || {
        format!("cli wrote {} adapters", inputs.len())
    })?;
    let merged_path = dir.path().join("merged.sadp");
    let status = Command::new(exe)
        .args([
            "merge",
            "--merge",
            "sparse-overlap",
            "-o",
            merged_path.to_str().unwrap(),
        ])
        .args(&inputs)
        .status()
        .map_err(err)?;
    check(status.success(), || {
        format!("cli merge exited with {status}")
    })?;
    let (from_cli, _) = read_file(&merged_path).map_err(err)?;

    let cfg = spadapt::cli::load_config(&spadapt::cli::Common {
        config: None,
        seed: Some(17),
        out_dir: None,
        workers: None,
    })
    .map_err(err)?;
    let (model, suite) = spadapt::cli::setup(&cfg).map_err(err)?;
    let experts: Vec<Expert> = suite
        .held_in
        .iter()
        .map(|t| train_sparse(&model, t, &cfg.desk.train).map(Expert::Sparse))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let Merged::Sparse(in_process) = merge(
        &MergeSpec::new(MergeMethod::SparseOverlap),
        &experts.iter().collect::<Vec<_>>(),
    )
    .map_err(err)?
    else {
        return Err("library merge is not sparse".into());
    };
    let Expert::Sparse(cli_adapter) = &from_cli.expert else {
        return Err("cli merge is not sparse".into());
    };
    check(cli_adapter.layers.len() == in_process.layers.len(), || {
        "layer count differs".into()
    })?;
    for (site, l) in &in_process.layers {
        let other = &cli_adapter.layers[site];
        check(
            l.values.bit_eq(&other.values) && l.mask == other.mask,
            || format!("{site}: cli merge differs from in-process merge"),
        )?;
    }
    Ok("100 random adapters round-trip bitwise; CLI merge of 8 desk adapters equals in-process merge bitwise".into())
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| match &outcome {
        Ok(detail) => println!("PASS [{n:>2}] {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL [{n:>2}] {name}: {detail}");
        }
    };
    report(1, "gradient oracle", criterion_gradients());
    report(2, "mask contracts", criterion_masks());
    report(3, "sparse merge oracle", criterion_sparse_merge());
    report(4, "baseline merge oracles", criterion_baselines());
    report(5, "training contract", criterion_algorithm());
    match run_bundles() {
        Ok(runs) => {
            report(6, "merged-method ordering", criterion_table_pattern(&runs));
            report(
                7,
                "keep-ratio ordering",
                criterion_keep_ratio_pattern(&runs),
            );
            report(
                8,
                "interference decomposition",
                criterion_decomposition(&runs),
            );
            report(9, "expert scaling", criterion_scaling(&runs));
        }
        Err(e) => {
            for (n, name) in [
                (6, "merged-method ordering"),
                (7, "keep-ratio ordering"),
                (8, "interference decomposition"),
                (9, "expert scaling"),
            ] {
                report(n, name, Err(e.clone()));
            }
        }
    }
    report(10, "layer drop", criterion_layer_drop());
    report(11, "persistence", criterion_persistence());
    println!(
        "{} of 11 criteria passed in {:.0} s",
        11 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
