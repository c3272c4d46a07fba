//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `NODEGAM_ACCEPTANCE=1,4,7` runs a subset. Criterion 9 needs the Wine
//! quality CSV at `NODEGAM_WINE_CSV`.

mod common;

use std::time::Instant;

use common::*;
use nodegam::interpret::{
    self, extract_ga2m_terms, purify, purify_explanation, reconstruction_gap, DEFAULT_BINS,
};
use nodegam::layer::Mode;
use nodegam::network::{Arch, ModelConfig, NodeGamModel, Task};
use nodegam::numeric::{entmax15, entmax15_vjp, entmoid15, entmoid15_grad, Matrix};
use nodegam::preprocess::{Frame, Pipeline, PreprocessConfig};
use nodegam::training::{self, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn judge(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

fn names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Desk-scale stand-in for the recommended default: attention arch, two
/// layers, no dropout.
fn desk_config(mode: Mode, d: usize, trees: usize, depth: usize, anneal: u64) -> ModelConfig {
    ModelConfig {
        mode,
        arch: Arch::Attention,
        num_layers: 2,
        trees_per_layer: trees,
        depth,
        addi_tree_dim: 0,
        output_dropout: 0.0,
        last_dropout: 0.0,
        colsample: 1.0,
        l2_lambda: 0.0,
        attention_dim: 8,
        anneal_steps: anneal,
        min_temperature: 0.01,
        num_features: d,
        num_outputs: 1,
        task: Task::Regression,
        add_last_linear: true,
    }
}

fn desk_train(steps: u64, batch: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: batch,
        warmup_steps: 100,
        eval_interval_steps: 100,
        checkpoint_interval_steps: 100,
        max_steps: Some(steps),
        seed,
        ..Default::default()
    }
}

/// Fits the preprocessing pipeline on the training rows and trains.
struct Fitted {
    model: NodeGamModel,
    pipeline: Pipeline,
}

fn fit(
    cfg: ModelConfig,
    tc: &TrainConfig,
    x: &Matrix,
    y: &[f64],
    vx: &Matrix,
    vy: &[f64],
) -> Fitted {
    let feature_names = names(x.ncols());
    let frame = Frame::from_matrix(x, &feature_names, Some(y.to_vec()));
    let pipeline = Pipeline::fit(
        &frame,
        Some("y"),
        PreprocessConfig {
            seed: tc.seed,
            ..Default::default()
        },
    )
    .unwrap();
    let gx = pipeline.gaussianize(x).unwrap();
    let gvx = pipeline.gaussianize(vx).unwrap();
    let mut model = NodeGamModel::new(cfg, &mut NodeGamModel::rng(tc.seed)).unwrap();
    training::train(&mut model, &gx, y, &gvx, vy, tc).unwrap();
    Fitted { model, pipeline }
}

impl Fitted {
    fn predict(&self, raw: &Matrix) -> Vec<f64> {
        let x = self.pipeline.gaussianize(raw).unwrap();
        training::predict_batched(&self.model, &x)
            .unwrap()
            .column(0)
            .to_vec()
    }
}

// ---------------------------------------------------------------------------

/// Sparse 1.5-entmax by bisection on the threshold.
fn entmax_oracle(z: &[f64], t: f64) -> Vec<f64> {
    let s: Vec<f64> = z.iter().map(|v| v / (2.0 * t)).collect();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mass = |tau: f64| s.iter().map(|v| (v - tau).max(0.0).powi(2)).sum::<f64>();
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    s.iter().map(|v| (v - tau).max(0.0).powi(2)).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut max_dev, mut max_sum_err) = (0.0f64, 0.0f64);
    let mut one_hot = true;
    for i in 0..1000 {
        let n = rng.gen_range(2..=64);
        let z: Vec<f64> = (0..n).map(|_| normal(&mut rng) * 2.0).collect();
        let t = [0.01, 0.1, 1.0][i % 3];
        let p = entmax15(&z, t).unwrap();
        let q = entmax_oracle(&z, t);
        for (a, b) in p.iter().zip(&q) {
            max_dev = max_dev.max((a - b).abs());
        }
        max_sum_err = max_sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
        let hard = entmax15(&z, 0.0).unwrap();
        let top = nodegam::numeric::argmax(&z).unwrap();
        one_hot &= hard
            .iter()
            .enumerate()
            .all(|(k, v)| *v == if k == top { 1.0 } else { 0.0 });
    }
    judge(
        max_dev <= 1e-8 && max_sum_err <= 1e-12 && one_hot,
        format!("max component gap {max_dev:.1e}, max |sum-1| {max_sum_err:.1e}, one-hot at T=0: {one_hot}"),
    )
}

// ---------------------------------------------------------------------------

fn entmax_grad_check(points: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < points {
        let n = rng.gen_range(2..10);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let support = |z: &[f64]| {
            entmax15(z, 1.0)
                .unwrap()
                .iter()
                .map(|p| *p > 0.0)
                .collect::<Vec<_>>()
        };
        let i = rng.gen_range(0..n);
        let shifted = |d: f64| {
            let mut z2 = z.clone();
            z2[i] += d;
            z2
        };
        let base = support(&z);
        if [KINK_RADIUS, -KINK_RADIUS]
            .iter()
            .any(|d| support(&shifted(*d)) != base)
        {
            continue;
        }
        let g = entmax15_vjp(&entmax15(&z, 1.0).unwrap(), &u).unwrap();
        let f = |z: &[f64]| -> f64 {
            entmax15(z, 1.0)
                .unwrap()
                .iter()
                .zip(&u)
                .map(|(p, u)| p * u)
                .sum()
        };
        let numeric = (f(&shifted(FD_STEP)) - f(&shifted(-FD_STEP))) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g[i], numeric));
        checked += 1;
    }
    worst
}

fn entmoid_grad_check(points: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < points {
        let x: f64 = rng.gen_range(-3.0..3.0);
        if (x.abs() - 2.0).abs() < KINK_RADIUS {
            continue;
        }
        let numeric = (entmoid15(x + FD_STEP) - entmoid15(x - FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(entmoid15_grad(x), numeric));
        checked += 1;
    }
    worst
}

fn criterion_2() -> Outcome {
    const POINTS: usize = 100;
    // T = 0.0625^(1000/4000) = 0.5.
    let at_half = |mut cfg: ModelConfig| {
        cfg.min_temperature = 0.0625;
        cfg.anneal_steps = 4000;
        cfg
    };
    let mut rows = vec![
        ("entmax15".to_string(), entmax_grad_check(POINTS)),
        ("entmoid15".to_string(), entmoid_grad_check(POINTS)),
    ];
    for mode in [Mode::Gam, Mode::Ga2m] {
        let mut single = at_half(tiny_config(mode, Arch::Plain));
        single.num_layers = 1;
        let r = check_model_gradients(&single, 1000, false, POINTS, 203);
        rows.push((format!("tree layer {mode:?}"), r.max_rel));
    }
    for mode in [Mode::Gam, Mode::Ga2m] {
        for arch in [Arch::Plain, Arch::Attention] {
            let r =
                check_model_gradients(&at_half(tiny_config(mode, arch)), 1000, false, POINTS, 204);
            rows.push((format!("model {mode:?}/{arch:?}"), r.max_rel));
        }
    }
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = rows
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    judge(
        worst < 1e-4,
        format!("max relative error over {POINTS} points each: {detail}"),
    )
}

// ---------------------------------------------------------------------------

fn additive_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Matrix, Vec<f64>) {
    let x = uniform_matrix(rng, n, d);
    let y = (0..n)
        .map(|i| {
            let r = x.row(i);
            r[0] * r[1] + (2.0 * r[2]).sin() + r[3] * r[3] - r[4] + 0.1 * normal(rng)
        })
        .collect();
    (x, y)
}

fn criterion_3() -> Outcome {
    let d = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let (x, y) = additive_data(&mut rng, 4000, d);
    let (vx, vy) = additive_data(&mut rng, 1000, d);
    let tc = desk_train(800, 256, 0.01, 302);
    let mut worst = [0.0f64; 2];
    for (m, mode) in [Mode::Gam, Mode::Ga2m].into_iter().enumerate() {
        let f = fit(desk_config(mode, d, 16, 3, 400), &tc, &x, &y, &vx, &vy);
        assert!(f.model.is_annealed());
        let eval = |rows: &Matrix| {
            training::predict_batched(&f.model, rows)
                .unwrap()
                .column(0)
                .to_vec()
        };
        let contexts = gaussian_matrix(&mut rng, 100, d);
        for _ in 0..20 {
            match mode {
                Mode::Gam => {
                    // f(x with x_j = a) - f(x with x_j = b) must not depend on x.
                    let j = rng.gen_range(0..d);
                    let (a, b) = (normal(&mut rng), normal(&mut rng));
                    let (mut xa, mut xb) = (contexts.clone(), contexts.clone());
                    xa.column_mut(j).fill(a);
                    xb.column_mut(j).fill(b);
                    let diff: Vec<f64> = eval(&xa)
                        .iter()
                        .zip(eval(&xb))
                        .map(|(p, q)| p - q)
                        .collect();
                    for v in &diff {
                        worst[m] = worst[m].max((v - diff[0]).abs());
                    }
                }
                Mode::Ga2m => {
                    // Third-order mixed difference over three distinct features.
                    let mut feats = rand::seq::index::sample(&mut rng, d, 3).into_vec();
                    feats.sort_unstable();
                    let lo: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
                    let hi: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
                    let mut total = vec![0.0; contexts.nrows()];
                    for corner in 0..8u32 {
                        let mut xc = contexts.clone();
                        let mut sign = 1.0;
                        for (k, &j) in feats.iter().enumerate() {
                            let up = corner >> k & 1 == 1;
                            xc.column_mut(j).fill(if up { hi[k] } else { lo[k] });
                            if !up {
                                sign = -sign;
                            }
                        }
                        for (t, v) in total.iter_mut().zip(eval(&xc)) {
                            *t += sign * v;
                        }
                    }
                    for t in total {
                        worst[m] = worst[m].max(t.abs());
                    }
                }
            }
        }
    }
    judge(
        worst[0] <= 1e-9 && worst[1] <= 1e-9,
        format!(
            "GAM one-feature difference spread {:.1e}, GA2M third-order mixed difference {:.1e} (100 contexts x 20 probes)",
            worst[0], worst[1]
        ),
    )
}

// ---------------------------------------------------------------------------

/// Grid-valued data: every feature has at most 81 distinct values, so the
/// 256-bin tables see every value exactly.
fn grid_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Matrix, Vec<f64>) {
    let x = Matrix::from_shape_simple_fn((n, d), || rng.gen_range(-40..=40) as f64 / 40.0);
    let y = (0..n)
        .map(|i| {
            let r = x.row(i);
            2.0 * r[0] * r[1] + (3.0 * r[2]).sin() + r[3] + 0.1 * normal(rng)
        })
        .collect();
    (x, y)
}

fn criterion_4() -> Outcome {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let (x, y) = grid_rows(&mut rng, 4000, d);
    let (vx, vy) = grid_rows(&mut rng, 1000, d);
    let (held, _) = grid_rows(&mut rng, 1000, d);
    let f = fit(
        desk_config(Mode::Ga2m, d, 16, 3, 400),
        &desk_train(800, 256, 0.01, 402),
        &x,
        &y,
        &vx,
        &vy,
    );
    let raw = extract_ga2m_terms(&f.model, &x, Some(&f.pipeline), DEFAULT_BINS, &names(d)).unwrap();
    let before = reconstruction_gap(&raw, &f.model, &held, Some(&f.pipeline)).unwrap();
    let mut pure = raw.clone();
    purify_explanation(&mut pure, false);
    let after = reconstruction_gap(&pure, &f.model, &held, Some(&f.pipeline)).unwrap();
    judge(
        before <= 1e-5 && after <= 1e-4,
        format!(
            "max gap on 1000 held rows: {before:.1e} before purification, {after:.1e} after purify+center; {} pair tables",
            pure.interactions.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let (mut max_sweeps, mut max_mean, mut max_sum, mut max_idem) =
        (0usize, 0.0f64, 0.0f64, 0.0f64);
    let mut converged = true;
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let table: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| normal(&mut rng) * 3.0).collect())
            .collect();
        let mut mj: Vec<f64> = (0..r).map(|_| normal(&mut rng)).collect();
        let mut mk: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
        let total =
            |s: &[Vec<f64>], mj: &[f64], mk: &[f64], a: usize, b: usize| s[a][b] + mj[a] + mk[b];
        let (t0, j0, k0) = (table.clone(), mj.clone(), mk.clone());
        let mut s = table;
        let rep = purify(&mut s, &mut mj, &mut mk, None);
        converged &= rep.converged;
        max_sweeps = max_sweeps.max(rep.sweeps);
        for a in 0..r {
            max_mean = max_mean.max((s[a].iter().sum::<f64>() / c as f64).abs());
            for b in 0..c {
                max_sum =
                    max_sum.max((total(&s, &mj, &mk, a, b) - total(&t0, &j0, &k0, a, b)).abs());
            }
        }
        for b in 0..c {
            max_mean = max_mean.max((s.iter().map(|row| row[b]).sum::<f64>() / r as f64).abs());
        }
        let (s1, j1, k1) = (s.clone(), mj.clone(), mk.clone());
        purify(&mut s, &mut mj, &mut mk, None);
        let flat = |s: &[Vec<f64>]| s.iter().flatten().copied().collect::<Vec<_>>();
        for (p, q) in flat(&s)
            .iter()
            .chain(&mj)
            .chain(&mk)
            .zip(flat(&s1).iter().chain(&j1).chain(&k1))
        {
            max_idem = max_idem.max((p - q).abs());
        }
    }
    let mut hand = vec![vec![2.0, 0.0], vec![0.0, 0.0]];
    let (mut hj, mut hk) = (vec![0.0; 2], vec![0.0; 2]);
    purify(&mut hand, &mut hj, &mut hk, None);
    let hand_ok = hand == vec![vec![0.5, -0.5], vec![-0.5, 0.5]]
        && hj == vec![1.0, 0.0]
        && hk == vec![0.5, -0.5];
    judge(
        converged && max_sweeps < 500 && max_mean < 1e-8 && max_sum <= 1e-9 && max_idem <= 1e-12 && hand_ok,
        format!(
            "100 tables: max sweeps {max_sweeps}, max row/col mean {max_mean:.1e}, cell-sum drift {max_sum:.1e}, \
             idempotence {max_idem:.1e}, hand case exact: {hand_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn shape_truth(j: usize, v: f64) -> f64 {
    match j {
        0 => 3.0 * v,
        1 => 2.0 * (3.0 * v).sin(),
        _ => v * v,
    }
}

fn shape_rows(rng: &mut ChaCha8Rng, n: usize) -> (Matrix, Vec<f64>) {
    let x = uniform_matrix(rng, n, 3);
    let y = (0..n)
        .map(|i| (0..3).map(|j| shape_truth(j, x[[i, j]])).sum::<f64>() + 0.1 * normal(rng))
        .collect();
    (x, y)
}

fn rmse_of(p: &[f64], y: &[f64]) -> f64 {
    training::rmse(p, y)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let (x, y) = shape_rows(&mut rng, 16_000);
    let (vx, vy) = shape_rows(&mut rng, 4_000);
    let (tx, ty) = shape_rows(&mut rng, 5_000);
    let start = Instant::now();
    let f = fit(
        desk_config(Mode::Gam, 3, 32, 3, 800),
        &desk_train(1500, 512, 0.01, 602),
        &x,
        &y,
        &vx,
        &vy,
    );
    let secs = start.elapsed().as_secs_f64();
    let test_rmse = rmse_of(&f.predict(&tx), &ty);
    let exp = interpret::explain(
        &f.model,
        &x,
        Some(&f.pipeline),
        DEFAULT_BINS,
        &names(3),
        false,
    )
    .unwrap();
    let rs: Vec<f64> = (0..3)
        .map(|j| {
            let s = &exp.shapes[j];
            let fitted: Vec<f64> = tx
                .column(j)
                .iter()
                .map(|v| s.values[s.bins.bin_of(*v)])
                .collect();
            let truth: Vec<f64> = tx.column(j).iter().map(|v| shape_truth(j, *v)).collect();
            pearson(&fitted, &truth)
        })
        .collect();
    let min_r = rs.iter().cloned().fold(f64::INFINITY, f64::min);
    judge(
        min_r >= 0.95 && test_rmse <= 0.15 && secs < 900.0,
        format!(
            "shape r = [{:.4}, {:.4}, {:.4}], test RMSE {test_rmse:.4}, train time {secs:.0} s (n = 20000, desk-scale config)",
            rs[0], rs[1], rs[2]
        ),
    )
}

// ---------------------------------------------------------------------------

fn product_rows(rng: &mut ChaCha8Rng, n: usize) -> (Matrix, Vec<f64>) {
    let x = uniform_matrix(rng, n, 3);
    let y = (0..n)
        .map(|i| x[[i, 0]] * x[[i, 1]] + x[[i, 2]] + 0.1 * normal(rng))
        .collect();
    (x, y)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(701);
    let (x, y) = product_rows(&mut rng, 16_000);
    let (vx, vy) = product_rows(&mut rng, 4_000);
    let (tx, ty) = product_rows(&mut rng, 5_000);
    let tc = desk_train(1500, 512, 0.01, 702);
    // Best of two GAM capacities, so the gap is not an artifact of size.
    let gam_rmse = [(32, 3), (64, 4)]
        .iter()
        .map(|&(trees, depth)| {
            let f = fit(
                desk_config(Mode::Gam, 3, trees, depth, 800),
                &tc,
                &x,
                &y,
                &vx,
                &vy,
            );
            rmse_of(&f.predict(&tx), &ty)
        })
        .fold(f64::INFINITY, f64::min);
    let f = fit(
        desk_config(Mode::Ga2m, 3, 32, 3, 800),
        &tc,
        &x,
        &y,
        &vx,
        &vy,
    );
    let ga2m_rmse = rmse_of(&f.predict(&tx), &ty);
    let exp = interpret::explain(
        &f.model,
        &x,
        Some(&f.pipeline),
        DEFAULT_BINS,
        &names(3),
        false,
    )
    .unwrap();
    let surface_r = match exp.interactions.iter().find(|p| p.features == (0, 1)) {
        Some(p) => {
            let (b0, b1) = (&exp.shapes[0].bins, &exp.shapes[1].bins);
            let fitted: Vec<f64> = tx
                .rows()
                .into_iter()
                .map(|r| p.values[b0.bin_of(r[0])][b1.bin_of(r[1])])
                .collect();
            let truth: Vec<f64> = tx.rows().into_iter().map(|r| r[0] * r[1]).collect();
            pearson(&fitted, &truth)
        }
        None => f64::NAN,
    };
    judge(
        ga2m_rmse <= 0.5 * gam_rmse && surface_r >= 0.9,
        format!(
            "test RMSE GA2M {ga2m_rmse:.4} vs best GAM {gam_rmse:.4} (ratio {:.3}), (x1,x2) surface r = {surface_r:.4}",
            ga2m_rmse / gam_rmse
        ),
    )
}

// ---------------------------------------------------------------------------

/// Eight features driven by two latent factors; the target depends on the
/// factors only.
fn latent_rows(rng: &mut ChaCha8Rng, n: usize) -> (Matrix, Vec<f64>) {
    let mut x = Matrix::zeros((n, 8));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let z = [normal(rng), normal(rng)];
        for j in 0..8 {
            x[[i, j]] = z[j % 2] + 0.5 * normal(rng);
        }
        y.push(z[0] + (1.5 * z[1]).sin() + 0.1 * normal(rng));
    }
    (x, y)
}

fn criterion_8() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(801 + seed);
        let (ux, _) = latent_rows(&mut rng, 10_000);
        let (lx, ly) = latent_rows(&mut rng, 100);
        let (vx, vy) = latent_rows(&mut rng, 2_000);
        let mut cfg = desk_config(Mode::Gam, 8, 16, 3, 300);
        let budget = 2000;

        let frame = Frame::from_matrix(&ux, &names(8), None);
        let pipeline = Pipeline::fit(
            &frame,
            None,
            PreprocessConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let (gu, gl, gv) = (
            pipeline.gaussianize(&ux).unwrap(),
            pipeline.gaussianize(&lx).unwrap(),
            pipeline.gaussianize(&vx).unwrap(),
        );
        let val_rmse = |m: &NodeGamModel| {
            rmse_of(
                &training::predict_batched(m, &gv)
                    .unwrap()
                    .column(0)
                    .to_vec(),
                &vy,
            )
        };

        // Pretrain on all unlabeled rows, then finetune on the 1% labeled.
        // Each arm picks its learning rate on the validation rows.
        cfg.num_outputs = 8;
        let mut pre = NodeGamModel::new(cfg.clone(), &mut NodeGamModel::rng(seed)).unwrap();
        let (pu, pv) = (
            gu.slice(ndarray::s![..8000, ..]).to_owned(),
            gu.slice(ndarray::s![8000.., ..]).to_owned(),
        );
        training::pretrain(&mut pre, &pu, &pv, &desk_train(600, 512, 0.01, seed)).unwrap();
        let ft = [5e-5, 1e-4, 3e-4, 5e-4]
            .iter()
            .map(|&lr| {
                let mut m = pre.clone();
                let ft_cfg = TrainConfig {
                    freeze_steps: 100,
                    ..desk_train(budget, 100, lr, seed)
                };
                training::finetune(&mut m, Task::Regression, &gl, &ly, &gv, &vy, &ft_cfg).unwrap();
                val_rmse(&m)
            })
            .fold(f64::INFINITY, f64::min);

        // Same architecture and step budget from scratch.
        cfg.num_outputs = 1;
        let scratch = [0.01, 5e-3, 5e-4]
            .iter()
            .map(|&lr| {
                let mut m = NodeGamModel::new(cfg.clone(), &mut NodeGamModel::rng(seed)).unwrap();
                training::train(
                    &mut m,
                    &gl,
                    &ly,
                    &gv,
                    &vy,
                    &desk_train(budget, 100, lr, seed),
                )
                .unwrap();
                val_rmse(&m)
            })
            .fold(f64::INFINITY, f64::min);
        if ft <= scratch {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {ft:.4} vs {scratch:.4}"));
    }
    judge(
        wins >= 2,
        format!(
            "val RMSE pretrained+finetuned vs scratch, 100 labels: {} ({wins}/3 wins)",
            rows.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let Some(path) = std::env::var_os("NODEGAM_WINE_CSV") else {
        return Outcome {
            verdict: Verdict::Skip,
            detail: "set NODEGAM_WINE_CSV to the wine quality CSV to run".into(),
        };
    };
    let text = std::fs::read_to_string(&path).unwrap();
    let delim = if text.lines().next().unwrap_or("").contains(';') {
        b';'
    } else {
        b','
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .from_reader(text.as_bytes());
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| {
            r.unwrap()
                .iter()
                .map(|v| v.trim().parse::<f64>().unwrap())
                .collect()
        })
        .collect();
    let d = rows[0].len() - 1;
    let n = rows.len();
    let x = Matrix::from_shape_fn((n, d), |(i, j)| rows[i][j]);
    let y: Vec<f64> = rows.iter().map(|r| r[d]).collect();
    // Best reported GAM setting for this dataset.
    let cfg = ModelConfig {
        mode: Mode::Gam,
        arch: Arch::Plain,
        num_layers: 5,
        trees_per_layer: 800,
        depth: 2,
        addi_tree_dim: 1,
        output_dropout: 0.0,
        last_dropout: 0.1,
        colsample: 0.5,
        l2_lambda: 1e-5,
        attention_dim: 0,
        anneal_steps: 4000,
        min_temperature: 0.01,
        num_features: d,
        num_outputs: 1,
        task: Task::Regression,
        add_last_linear: true,
    };
    let steps: u64 = std::env::var("NODEGAM_WINE_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(8000);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(31));
    let mut fold_rmse = Vec::new();
    let start = Instant::now();
    for k in 0..5 {
        let test: Vec<usize> = order.iter().copied().skip(k).step_by(5).collect();
        let rest: Vec<usize> = order
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % 5 != k)
            .map(|(_, v)| v)
            .collect();
        let cut = rest.len() * 4 / 5;
        let pick = |idx: &[usize]| {
            (
                x.select(ndarray::Axis(0), idx),
                idx.iter().map(|&i| y[i]).collect::<Vec<_>>(),
            )
        };
        let ((tx, ty), (vx, vy), (sx, sy)) = (pick(&rest[..cut]), pick(&rest[cut..]), pick(&test));
        let f = fit(
            cfg.clone(),
            &desk_train(steps, 2048, 0.005, 31),
            &tx,
            &ty,
            &vx,
            &vy,
        );
        fold_rmse.push(rmse_of(&f.predict(&sx), &sy));
    }
    let mean = fold_rmse.iter().sum::<f64>() / 5.0;
    judge(
        mean <= 0.78,
        format!(
            "5-fold test RMSE {mean:.4} (folds {fold_rmse:.3?}), {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (x, y) = additive_data(&mut rng, 2000, 5);
    let (vx, vy) = additive_data(&mut rng, 500, 5);
    let bytes = |mode: Mode| {
        let f = fit(
            desk_config(mode, 5, 8, 3, 100),
            &desk_train(300, 128, 0.01, 1002),
            &x,
            &y,
            &vx,
            &vy,
        );
        let mut file = nodegam::container::ModelFile::new(f.model, Some(f.pipeline));
        file.provenance.insert("seed".into(), "1002".into());
        file.to_bytes().unwrap()
    };
    let mut same = true;
    for mode in [Mode::Gam, Mode::Ga2m] {
        same &= bytes(mode) == bytes(mode);
    }
    judge(
        same,
        format!("two identical GAM and GA2M runs give identical containers: {same}"),
    )
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "entmax oracle", criterion_1),
    (2, "gradient suite", criterion_2),
    (3, "structural additivity", criterion_3),
    (4, "explanation reconstruction", criterion_4),
    (5, "purification properties", criterion_5),
    (6, "synthetic shape recovery", criterion_6),
    (7, "interaction recovery", criterion_7),
    (8, "self-supervision direction", criterion_8),
    (9, "wine ballpark", criterion_9),
    (10, "determinism", criterion_10),
];

fn main() {
    let subset: Option<Vec<u32>> = std::env::var("NODEGAM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if subset.as_ref().is_some_and(|s| !s.contains(id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let tag = match outcome.verdict {
            Verdict::Pass => "PASS",
            Verdict::Skip => "SKIP",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!(
            "criterion {id:>2} [{tag}] {name}: {} ({:.1} s)",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed or were skipped");
}
