#![allow(dead_code)]

use nodegam::layer::Mode;
use nodegam::network::{Arch, ModelConfig, NodeGamModel, Task};
use nodegam::numeric::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const KINK_RADIUS: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn tiny_config(mode: Mode, arch: Arch) -> ModelConfig {
    ModelConfig {
        mode,
        arch,
        num_layers: 2,
        trees_per_layer: 4,
        depth: 2,
        addi_tree_dim: 1,
        output_dropout: 0.0,
        last_dropout: 0.0,
        colsample: 1.0,
        l2_lambda: 0.0,
        attention_dim: if arch == Arch::Attention { 3 } else { 0 },
        anneal_steps: 4000,
        min_temperature: 0.01,
        num_features: 3,
        num_outputs: 1,
        task: Task::Regression,
        add_last_linear: true,
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, what: String) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel {
            self.max_rel = e;
            self.worst = format!("{what}: analytic {analytic:e} vs numeric {numeric:e}");
        }
    }
}

/// Random weighting `Σ R∘U + Σ X_P∘V` of both model outputs, evaluated with a
/// fixed dropout seed so repeated calls see the same masks.
struct Probe {
    x: Matrix,
    u: Matrix,
    v: Matrix,
    dropout_seed: Option<u64>,
}

impl Probe {
    fn eval(&self, model: &NodeGamModel) -> (f64, u64) {
        let mut rng = self.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let (r, cache) = model.forward_cached(&self.x, rng.as_mut()).unwrap();
        let loss = (&r.response * &self.u).sum() + (&r.tree_outputs * &self.v).sum();
        (loss, cache.signature())
    }
}

/// Compares backward against central differences on `points` randomly drawn
/// parameter entries, re-drawing model and entry whenever a kink lies within
/// [`KINK_RADIUS`].
pub fn check_model_gradients(
    config: &ModelConfig,
    step: u64,
    dropout: bool,
    points: usize,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut attempts = 0;
    while report.checked < points {
        attempts += 1;
        assert!(attempts < points * 50, "too many kinks: {report:?}");
        let mut model = NodeGamModel::new(config.clone(), &mut rng).unwrap();
        model.step = step;
        for layer in &mut model.layers {
            layer.log_slopes.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            layer.thresholds.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let n = 5;
        let probe = Probe {
            x: random_matrix(&mut rng, n, config.num_features, 1.5),
            u: random_matrix(&mut rng, n, config.num_outputs, 1.0),
            v: random_matrix(&mut rng, n, config.total_outputs(), 1.0),
            dropout_seed: dropout.then(|| rng.gen()),
        };
        let mut drng = probe.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let (res, cache) = model.forward_cached(&probe.x, drng.as_mut()).unwrap();
        let grads = model
            .backward(&probe.x, &res, &cache, &probe.u, Some(&probe.v))
            .unwrap();
        let base_sig = cache.signature();

        // A few entries per drawn model keeps the sample spread over models.
        for _ in 0..4 {
            let tensors = model.params().len();
            let t = rng.gen_range(0..tensors);
            let (rows, cols) = model.params()[t].dim();
            let idx = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            let at = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[t][idx] += delta;
                probe.eval(&m)
            };
            if [KINK_RADIUS, -KINK_RADIUS, FD_STEP, -FD_STEP]
                .iter()
                .any(|d| at(*d).1 != base_sig)
            {
                report.skipped += 1;
                continue;
            }
            let numeric = (at(FD_STEP).0 - at(-FD_STEP).0) / (2.0 * FD_STEP);
            report.record(grads[t][idx], numeric, format!("tensor {t} entry {idx:?}"));
            if report.checked == points {
                break;
            }
        }
    }
    report
}

pub fn small_config(mode: Mode, arch: Arch, num_features: usize, task: Task) -> ModelConfig {
    ModelConfig {
        mode,
        arch,
        num_layers: 2,
        trees_per_layer: 8,
        depth: if mode == Mode::Ga2m { 2 } else { 1 },
        addi_tree_dim: 0,
        output_dropout: 0.0,
        last_dropout: 0.0,
        colsample: 1.0,
        l2_lambda: 0.0,
        attention_dim: if arch == Arch::Attention { 4 } else { 0 },
        anneal_steps: 200,
        min_temperature: 0.01,
        num_features,
        num_outputs: 1,
        task,
        add_last_linear: true,
    }
}

pub fn quick_train_config(steps: u64, seed: u64) -> nodegam::training::TrainConfig {
    nodegam::training::TrainConfig {
        lr: 0.02,
        batch_size: 128,
        warmup_steps: 20,
        eval_interval_steps: 50,
        checkpoint_interval_steps: 50,
        max_steps: Some(steps),
        seed,
        ..Default::default()
    }
}

/// Standard-normal design matrix.
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
