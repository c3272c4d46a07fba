//! Supervised training, masked-reconstruction pretraining and finetuning.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::network::{ModelRng, NodeGamModel, Task};
use crate::numeric::{ensure_finite, sigmoid, Matrix};
use crate::optim::{QhAdam, QhAdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub plateau_patience_steps: u64,
    pub plateau_decay_factor: f64,
    pub early_stop_steps: u64,
    pub checkpoint_count: usize,
    pub checkpoint_interval_steps: u64,
    pub eval_interval_steps: u64,
    pub max_train_hours: f64,
    /// Hard cap on optimizer steps for this run.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub mask_rate: f64,
    pub freeze_steps: u64,
    pub optimizer: QhAdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 2048,
            warmup_steps: 500,
            plateau_patience_steps: 5000,
            plateau_decay_factor: 0.2,
            early_stop_steps: 11000,
            checkpoint_count: 5,
            checkpoint_interval_steps: 200,
            eval_interval_steps: 200,
            max_train_hours: 20.0,
            max_steps: None,
            seed: 0,
            mask_rate: 0.15,
            freeze_steps: 500,
            optimizer: QhAdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid("lr must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.plateau_decay_factor > 0.0 && self.plateau_decay_factor < 1.0) {
            return invalid("plateau_decay_factor must lie in (0, 1)");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return invalid("mask_rate must lie in (0, 1)");
        }
        if self.checkpoint_count == 0
            || self.checkpoint_interval_steps == 0
            || self.eval_interval_steps == 0
        {
            return invalid("checkpoint_count and the interval settings must be at least 1");
        }
        if !(self.max_train_hours > 0.0) {
            return invalid("max_train_hours must be > 0");
        }
        self.optimizer.validate()
    }
}

/// Linear warmup to `base` over `warmup` steps, then one factor of `decay`
/// per plateau event.
pub fn lr_schedule(step: u64, base: f64, warmup: u64, decays: u32, decay: f64) -> f64 {
    let ramp = if warmup == 0 || step >= warmup {
        1.0
    } else {
        step as f64 / warmup as f64
    };
    base * ramp * decay.powi(decays as i32)
}

/// Task loss on the model response plus `λ·mean(X_P²)`.
pub fn loss(
    response: &Matrix,
    targets: &[f64],
    tree_outputs: &Matrix,
    l2: f64,
    task: Task,
) -> Result<f64> {
    Ok(loss_and_grads(response, targets, tree_outputs, l2, task)?.0)
}

fn check_targets(targets: &[f64], task: Task) -> Result<()> {
    if task == Task::Binary && targets.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return invalid("binary targets must be 0 or 1");
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return invalid("targets must be finite");
    }
    Ok(())
}

fn l2_term(tree_outputs: &Matrix, l2: f64) -> (f64, Option<Matrix>) {
    if l2 == 0.0 || tree_outputs.is_empty() {
        return (0.0, None);
    }
    let count = tree_outputs.len() as f64;
    let value = l2 * tree_outputs.iter().map(|v| v * v).sum::<f64>() / count;
    (value, Some(tree_outputs * (2.0 * l2 / count)))
}

fn loss_and_grads(
    response: &Matrix,
    targets: &[f64],
    tree_outputs: &Matrix,
    l2: f64,
    task: Task,
) -> Result<(f64, Matrix, Option<Matrix>)> {
    let n = response.nrows();
    if response.ncols() != 1 || targets.len() != n || tree_outputs.nrows() != n {
        return invalid("response, targets and tree outputs must align");
    }
    check_targets(targets, task)?;
    let mut d = Matrix::zeros((n, 1));
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let r = response[[i, 0]];
        match task {
            Task::Regression => {
                total += (r - y) * (r - y);
                d[[i, 0]] = 2.0 * (r - y) / n as f64;
            }
            Task::Binary => {
                // softplus(r) - y r, written to stay finite for large |r|.
                total += r.max(0.0) - y * r + (-r.abs()).exp().ln_1p();
                d[[i, 0]] = (sigmoid(r) - y) / n as f64;
            }
        }
    }
    let (penalty, d_tree) = l2_term(tree_outputs, l2);
    Ok((total / n as f64 + penalty, d, d_tree))
}

/// Squared reconstruction error on masked cells only.
fn reconstruction_loss(response: &Matrix, original: &Matrix, mask: &Matrix) -> (f64, Matrix) {
    let count: f64 = mask.sum();
    if count == 0.0 {
        return (0.0, Matrix::zeros(response.raw_dim()));
    }
    let diff = (response - original) * mask;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / count;
    (value, diff * (2.0 / count))
}

/// Draws the pretraining mask: 1 marks a hidden cell.
pub fn draw_mask(rows: usize, cols: usize, rate: f64, rng: &mut ModelRng) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < rate {
            1.0
        } else {
            0.0
        }
    })
}

fn apply_mask(x: &Matrix, mask: &Matrix) -> Matrix {
    x * &mask.mapv(|m| 1.0 - m)
}

/// Area under the ROC curve, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid("scores and labels differ in length");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut pos) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank_sum += mid_rank;
                pos += 1.0;
            }
        }
        i = j + 1;
    }
    let neg = scores.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return invalid("AUC needs both classes");
    }
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

pub fn rmse(pred: &[f64], targets: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Validation score and whether larger is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub higher_is_better: bool,
}

impl Metric {
    fn improves_on(&self, best: Option<f64>) -> bool {
        match best {
            None => true,
            Some(b) if self.higher_is_better => self.value > b,
            Some(b) => self.value < b,
        }
    }
}

const EVAL_CHUNK: usize = 4096;

pub fn predict_batched(model: &NodeGamModel, x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros((x.nrows(), model.config.num_outputs));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let r = model.predict(&x.slice(ndarray::s![start..end, ..]).to_owned())?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&r);
        start = end;
    }
    Ok(out)
}

/// AUC for binary tasks, RMSE for regression.
pub fn evaluate(model: &NodeGamModel, x: &Matrix, y: &[f64]) -> Result<Metric> {
    let pred = predict_batched(model, x)?;
    let col: Vec<f64> = pred.column(0).to_vec();
    Ok(match model.config.task {
        Task::Binary => Metric {
            value: auc(&col, y)?,
            higher_is_better: true,
        },
        Task::Regression => Metric {
            value: rmse(&col, y),
            higher_is_better: false,
        },
    })
}

fn evaluate_reconstruction(model: &NodeGamModel, x: &Matrix, mask: &Matrix) -> Result<Metric> {
    let pred = predict_batched(model, &apply_mask(x, mask))?;
    Ok(Metric {
        value: reconstruction_loss(&pred, x, mask).0,
        higher_is_better: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
    TimeLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
    pub best_metric: Option<f64>,
    pub best_step: Option<u64>,
    pub stop_reason: Option<StopReason>,
    pub steps: u64,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::container::write_atomic(path, self.to_jsonl()?.as_bytes())
    }
}

/// Fixed-capacity ring of parameter snapshots.
#[derive(Clone, Debug, Default)]
pub struct CheckpointRing {
    capacity: usize,
    snapshots: VecDeque<Vec<Matrix>>,
}

impl CheckpointRing {
    pub fn new(capacity: usize) -> CheckpointRing {
        CheckpointRing {
            capacity,
            snapshots: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, params: Vec<Matrix>) {
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(params);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Element-wise arithmetic mean (sum in push order, divided by the
    /// count). Entries equal across all snapshots are returned unchanged.
    pub fn average(&self) -> Option<Vec<Matrix>> {
        let first = self.snapshots.front()?;
        let k = self.snapshots.len() as f64;
        let mut out = Vec::with_capacity(first.len());
        for t in 0..first.len() {
            let mut sum = first[t].clone();
            for s in self.snapshots.iter().skip(1) {
                sum += &s[t];
            }
            let mut mean = sum / k;
            ndarray::Zip::indexed(&mut mean).for_each(|idx, m| {
                let v = first[t][idx];
                if self.snapshots.iter().all(|s| s[t][idx] == v) {
                    *m = v;
                }
            });
            out.push(mean);
        }
        Some(out)
    }
}

enum Objective<'a> {
    Supervised { y: &'a [f64], val_y: &'a [f64] },
    Reconstruction { val_mask: Matrix },
}

/// Everything that differs between the three training flavours.
struct RunSpec<'a> {
    x: &'a Matrix,
    val_x: &'a Matrix,
    objective: Objective<'a>,
    freeze_steps: u64,
}

fn snapshot(model: &NodeGamModel) -> Vec<Matrix> {
    model.params().into_iter().cloned().collect()
}

fn restore(model: &mut NodeGamModel, params: Vec<Matrix>) {
    for (dst, src) in model.params_mut().into_iter().zip(params) {
        *dst = src;
    }
}

fn run(model: &mut NodeGamModel, spec: RunSpec, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    let n = spec.x.nrows();
    if n == 0 {
        return invalid("training data is empty");
    }
    let mut rng = ModelRng::seed_from_u64(config.seed);
    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    if model.step == 0 {
        let idx = &order[..batch];
        model.init_thresholds(&spec.x.select(ndarray::Axis(0), idx), &mut rng)?;
    }

    let mut opt = QhAdam::new(config.optimizer, &model.params())?;
    let all_active = vec![true; model.params().len()];
    let head_only = model.head_params();
    let mut ring = CheckpointRing::new(config.checkpoint_count);
    let mut history = History {
        records: Vec::new(),
        best_metric: None,
        best_step: None,
        stop_reason: None,
        steps: 0,
    };
    let has_val = spec.val_x.nrows() > 0;
    let started = Instant::now();
    let time_limit = config.max_train_hours * 3600.0;
    let (mut decays, mut last_event) = (0u32, 0u64);
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    let mut step = 0u64;
    loop {
        if config.max_steps.is_some_and(|m| step >= m) {
            history.stop_reason = Some(StopReason::MaxSteps);
            break;
        }
        if started.elapsed().as_secs_f64() >= time_limit {
            history.stop_reason = Some(StopReason::TimeLimit);
            break;
        }
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = spec.x.select(ndarray::Axis(0), idx);

        let (value, grads) = match &spec.objective {
            Objective::Supervised { y, .. } => {
                let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                let (res, cache) = model.forward_cached(&xb, Some(&mut rng))?;
                let (value, d_resp, d_tree) = loss_and_grads(
                    &res.response,
                    &yb,
                    &res.tree_outputs,
                    model.config.l2_lambda,
                    model.config.task,
                )?;
                (
                    value,
                    model.backward(&xb, &res, &cache, &d_resp, d_tree.as_ref())?,
                )
            }
            Objective::Reconstruction { .. } => {
                let mask = draw_mask(xb.nrows(), xb.ncols(), config.mask_rate, &mut rng);
                let masked = apply_mask(&xb, &mask);
                let (res, cache) = model.forward_cached(&masked, Some(&mut rng))?;
                let (rec, d_resp) = reconstruction_loss(&res.response, &xb, &mask);
                let (penalty, d_tree) = l2_term(&res.tree_outputs, model.config.l2_lambda);
                (
                    rec + penalty,
                    model.backward(&masked, &res, &cache, &d_resp, d_tree.as_ref())?,
                )
            }
        };
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {value} at step {}",
                model.step
            )));
        }
        loss_sum += value;
        loss_count += 1;

        step += 1;
        let lr = lr_schedule(
            step,
            config.lr,
            config.warmup_steps,
            decays,
            config.plateau_decay_factor,
        );
        let active = if step <= spec.freeze_steps {
            &head_only
        } else {
            &all_active
        };
        opt.step(model.params_mut(), &grads, lr, active)?;
        model.step += 1;
        history.steps = step;

        if step.is_multiple_of(config.checkpoint_interval_steps) {
            ring.push(snapshot(model));
        }
        if step.is_multiple_of(config.eval_interval_steps) {
            let metric = if has_val {
                let m = match &spec.objective {
                    Objective::Supervised { val_y, .. } => evaluate(model, spec.val_x, val_y)?,
                    Objective::Reconstruction { val_mask } => {
                        evaluate_reconstruction(model, spec.val_x, val_mask)?
                    }
                };
                if m.improves_on(history.best_metric) {
                    history.best_metric = Some(m.value);
                    history.best_step = Some(step);
                    last_event = step;
                }
                Some(m.value)
            } else {
                None
            };
            history.records.push(HistoryRecord {
                step: model.step,
                train_loss: loss_sum / loss_count.max(1) as f64,
                val_metric: metric,
                lr,
                temperature: model.temperature(),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
        if has_val {
            let since_best = step - history.best_step.unwrap_or(0);
            if since_best >= config.early_stop_steps {
                history.stop_reason = Some(StopReason::EarlyStop);
                break;
            }
            if step - last_event >= config.plateau_patience_steps {
                decays += 1;
                last_event = step;
            }
        }
    }
    if let Some(avg) = ring.average() {
        restore(model, avg);
    }
    Ok(history)
}

fn check_xy(x: &Matrix, y: &[f64], what: &str) -> Result<()> {
    if x.nrows() != y.len() {
        return invalid(format!(
            "{what}: {} rows but {} targets",
            x.nrows(),
            y.len()
        ));
    }
    ensure_finite(x, what)
}

/// Supervised training. A fresh model (step 0) gets its output offset from
/// the training targets and data-driven split thresholds.
pub fn train(
    model: &mut NodeGamModel,
    x: &Matrix,
    y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    config: &TrainConfig,
) -> Result<History> {
    check_xy(x, y, "training data")?;
    check_xy(val_x, val_y, "validation data")?;
    check_targets(y, model.config.task)?;
    if model.config.num_outputs != 1 {
        return invalid("supervised training needs a single-output model");
    }
    if model.step == 0 {
        model.set_output_bias(y)?;
    }
    run(
        model,
        RunSpec {
            x,
            val_x,
            objective: Objective::Supervised { y, val_y },
            freeze_steps: 0,
        },
        config,
    )
}

/// Masked-reconstruction pretraining: one output head per input feature.
pub fn pretrain(
    model: &mut NodeGamModel,
    x: &Matrix,
    val_x: &Matrix,
    config: &TrainConfig,
) -> Result<History> {
    ensure_finite(x, "pretraining data")?;
    ensure_finite(val_x, "validation data")?;
    if !model.config.add_last_linear {
        return invalid("pretraining needs add_last_linear (one head per feature)");
    }
    if model.config.num_outputs != model.config.num_features {
        return invalid(format!(
            "pretraining needs one head per feature: {} heads for {} features",
            model.config.num_outputs, model.config.num_features
        ));
    }
    model.output_bias = 0.0;
    let mut mask_rng = ModelRng::seed_from_u64(config.seed ^ 0x6d61_736b);
    let val_mask = draw_mask(
        val_x.nrows(),
        val_x.ncols(),
        config.mask_rate,
        &mut mask_rng,
    );
    run(
        model,
        RunSpec {
            x,
            val_x,
            objective: Objective::Reconstruction { val_mask },
            freeze_steps: 0,
        },
        config,
    )
}

/// Replaces the reconstruction heads with a single fresh head, trains only
/// that head for `freeze_steps` steps and then everything. The annealing step
/// counter carries over.
pub fn finetune(
    model: &mut NodeGamModel,
    task: Task,
    x: &Matrix,
    y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    config: &TrainConfig,
) -> Result<History> {
    check_xy(x, y, "training data")?;
    check_xy(val_x, val_y, "validation data")?;
    if y.is_empty() {
        return invalid("finetuning needs labeled data");
    }
    if !model.config.add_last_linear {
        return invalid("finetuning needs a model with a trainable last linear layer");
    }
    model.config.task = task;
    check_targets(y, task)?;
    let mut rng = ModelRng::seed_from_u64(config.seed ^ 0x6865_6164);
    model.reset_head(1, &mut rng)?;
    model.set_output_bias(y)?;
    run(
        model,
        RunSpec {
            x,
            val_x,
            objective: Objective::Supervised { y, val_y },
            freeze_steps: config.freeze_steps,
        },
        config,
    )
}
