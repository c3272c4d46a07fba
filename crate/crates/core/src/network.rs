//! The stacked NODE-GAM / NODE-GA²M network.
//!
//! Layer `l` sees the raw input plus every earlier layer's (post-dropout)
//! tree outputs, mixed through gates that only open between trees depending
//! on the same feature set. All tree outputs are concatenated into `X_P` and
//! fed to a last linear layer.

use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::layer::{LayerCache, LayerSpec, Mode, PrevOutputs, Selection, TreeLayer};
use crate::numeric::{dropout_mask, ensure_finite, sigmoid, Matrix};

pub type ModelRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Plain,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub arch: Arch,
    pub num_layers: usize,
    pub trees_per_layer: usize,
    pub depth: usize,
    pub addi_tree_dim: usize,
    pub output_dropout: f64,
    pub last_dropout: f64,
    pub colsample: f64,
    pub l2_lambda: f64,
    pub attention_dim: usize,
    pub anneal_steps: u64,
    pub min_temperature: f64,
    pub num_features: usize,
    pub num_outputs: usize,
    pub task: Task,
    pub add_last_linear: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Gam,
            arch: Arch::Attention,
            num_layers: 3,
            trees_per_layer: 666,
            depth: 4,
            addi_tree_dim: 0,
            output_dropout: 0.0,
            last_dropout: 0.5,
            colsample: 0.1,
            l2_lambda: 1e-5,
            attention_dim: 16,
            anneal_steps: 4000,
            min_temperature: 0.01,
            num_features: 1,
            num_outputs: 1,
            task: Task::Regression,
            add_last_linear: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.trees_per_layer == 0 {
            return invalid("num_layers and trees_per_layer must be at least 1");
        }
        let min_depth = if self.mode == Mode::Ga2m { 2 } else { 1 };
        if self.depth < min_depth {
            return invalid(format!(
                "{:?} needs depth >= {min_depth}, got {}",
                self.mode, self.depth
            ));
        }
        if self.depth > 12 {
            return invalid("depth above 12 is not supported");
        }
        match (self.arch, self.attention_dim) {
            (Arch::Attention, 0) => return invalid("attention arch needs attention_dim > 0"),
            (Arch::Plain, e) if e > 0 => {
                return invalid("attention_dim must be 0 for the plain arch")
            }
            _ => {}
        }
        for (name, rate) in [
            ("output_dropout", self.output_dropout),
            ("last_dropout", self.last_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return invalid(format!("{name} must lie in [0, 1), got {rate}"));
            }
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return invalid(format!(
                "colsample must lie in (0, 1], got {}",
                self.colsample
            ));
        }
        if !(self.l2_lambda >= 0.0) {
            return invalid("l2_lambda must be >= 0");
        }
        if !(self.min_temperature > 0.0 && self.min_temperature < 1.0) {
            return invalid("min_temperature must lie in (0, 1)");
        }
        if self.num_features == 0 || self.num_outputs == 0 {
            return invalid("num_features and num_outputs must be at least 1");
        }
        if !self.add_last_linear && self.num_outputs != 1 {
            return invalid("multiple output heads need add_last_linear");
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        1 + self.addi_tree_dim
    }

    /// Width of `X_P`: every tree's every output channel.
    pub fn total_outputs(&self) -> usize {
        self.num_layers * self.trees_per_layer * self.out_dim()
    }

    pub fn temperature(&self, step: u64) -> f64 {
        temperature_with_floor(step, self.anneal_steps, self.min_temperature)
    }
}

/// Annealing schedule `T = 10^(-2 s / S)` for `s <= S`, exactly 0 afterwards.
pub fn temperature(step: u64, anneal_steps: u64) -> f64 {
    temperature_with_floor(step, anneal_steps, 0.01)
}

fn temperature_with_floor(step: u64, anneal_steps: u64, floor: f64) -> f64 {
    if step == 0 {
        1.0
    } else if step > anneal_steps {
        0.0
    } else {
        floor.powf(step as f64 / anneal_steps as f64)
    }
}

/// Low-rank attention factors for one layer: logits `A = B·C`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFactors {
    /// `[P × E]`, P = previous trees × out_dim.
    pub b: Matrix,
    /// `[E × I]`.
    pub c: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeGamModel {
    pub config: ModelConfig,
    pub layers: Vec<TreeLayer>,
    /// One entry per layer; `None` for layer 1 and for the plain arch.
    pub attention: Vec<Option<AttentionFactors>>,
    /// `[total_outputs × num_outputs]`. Fixed averaging weights when
    /// `add_last_linear` is off.
    pub last_linear: Matrix,
    /// `[1 × num_outputs]`.
    pub bias: Matrix,
    /// Constant added to every output: class-prior log-odds (binary) or
    /// target mean (regression). Not trained.
    pub output_bias: f64,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub response: Matrix,
    pub tree_outputs: Matrix,
}

pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    /// Stacked selections of layers `0..l`, for each `l >= 1`.
    prev_selections: Vec<Option<Selection>>,
    output_masks: Vec<Option<Matrix>>,
    last_mask: Option<Matrix>,
    attention_logits: Vec<Option<Matrix>>,
    pub temperature: f64,
}

impl ForwardCache {
    /// Combined piecewise-regime signature of every layer.
    pub fn signature(&self) -> u64 {
        self.layers
            .iter()
            .fold(0u64, |acc, l| acc.rotate_left(7) ^ l.signature())
    }
}

/// Which features a tree depends on once selections are one-hot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    Main(usize),
    Pair(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeDependency {
    pub layer: usize,
    pub tree: usize,
    /// Selected features in depth order; a GA²M tree may repeat one.
    pub features: Vec<usize>,
}

impl TreeDependency {
    pub fn term(&self) -> Term {
        match self.features.as_slice() {
            [j] => Term::Main(*j),
            [a, b] if a == b => Term::Main(*a),
            [a, b] => Term::Pair((*a).min(*b), (*a).max(*b)),
            _ => unreachable!("trees select one or two features"),
        }
    }
}

impl NodeGamModel {
    pub fn new(config: ModelConfig, rng: &mut ModelRng) -> Result<NodeGamModel> {
        config.validate()?;
        let d_out = config.out_dim();
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut attention = Vec::with_capacity(config.num_layers);
        let spec = LayerSpec {
            mode: config.mode,
            num_trees: config.trees_per_layer,
            depth: config.depth,
            num_features: config.num_features,
            out_dim: d_out,
            colsample: config.colsample,
        };
        for l in 0..config.num_layers {
            layers.push(TreeLayer::init(&spec, rng)?);
            attention.push(if config.arch == Arch::Attention && l > 0 {
                let e = config.attention_dim;
                let p = l * config.trees_per_layer * d_out;
                let dist = Normal::new(0.0, 1.0 / (e as f64).sqrt()).unwrap();
                Some(AttentionFactors {
                    b: Array2::from_shape_simple_fn((p, e), || dist.sample(rng)),
                    c: Array2::from_shape_simple_fn((e, config.trees_per_layer), || {
                        dist.sample(rng)
                    }),
                })
            } else {
                None
            });
        }
        let last_linear = Self::initial_last_linear(&config, rng);
        let bias = Matrix::zeros((1, config.num_outputs));
        Ok(NodeGamModel {
            config,
            layers,
            attention,
            last_linear,
            bias,
            output_bias: 0.0,
            step: 0,
        })
    }

    fn initial_last_linear(config: &ModelConfig, rng: &mut ModelRng) -> Matrix {
        let total = config.total_outputs();
        if config.add_last_linear {
            let bound = 1.0 / (total as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Array2::from_shape_simple_fn((total, config.num_outputs), || dist.sample(rng))
        } else {
            let trees = (config.num_layers * config.trees_per_layer) as f64;
            let d_out = config.out_dim();
            Array2::from_shape_fn((total, config.num_outputs), |(p, _)| {
                if p % d_out == 0 {
                    1.0 / trees
                } else {
                    0.0
                }
            })
        }
    }

    /// Replaces the output head with a fresh one of `num_outputs` heads.
    pub fn reset_head(&mut self, num_outputs: usize, rng: &mut ModelRng) -> Result<()> {
        let mut config = self.config.clone();
        config.num_outputs = num_outputs;
        config.validate()?;
        self.last_linear = Self::initial_last_linear(&config, rng);
        self.bias = Matrix::zeros((1, num_outputs));
        self.config = config;
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature(self.step)
    }

    pub fn is_annealed(&self) -> bool {
        self.temperature() == 0.0
    }

    /// Sets the constant output offset from training targets.
    pub fn set_output_bias(&mut self, targets: &[f64]) -> Result<()> {
        if targets.is_empty() {
            return invalid("no targets to derive the output bias from");
        }
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        self.output_bias = match self.config.task {
            Task::Regression => mean,
            Task::Binary => {
                let p = mean.clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            }
        };
        Ok(())
    }

    /// Data-aware threshold initialization on one batch, layer by layer.
    pub fn init_thresholds(&mut self, x: &Matrix, rng: &mut ModelRng) -> Result<()> {
        let t = self.temperature();
        let n = x.nrows();
        let width = self.config.trees_per_layer * self.config.out_dim();
        let mut tree_outputs = Matrix::zeros((n, self.config.total_outputs()));
        let mut stacked: Option<Selection> = None;
        for l in 0..self.layers.len() {
            let attn = self.attention[l].as_ref().map(|a| a.b.dot(&a.c));
            let run = |layer: &TreeLayer, stacked: &Option<Selection>| {
                let prev = stacked.as_ref().map(|sel| PrevOutputs {
                    values: tree_outputs.slice(s![.., ..l * width]),
                    selection: sel,
                });
                layer.forward(x.view(), prev, attn.as_ref().map(|a| a.view()), t)
            };
            let (_, cache) = run(&self.layers[l], &stacked)?;
            self.layers[l].init_thresholds_from_data(&cache, rng);
            let (res, _) = run(&self.layers[l], &stacked)?;
            tree_outputs
                .slice_mut(s![.., l * width..(l + 1) * width])
                .assign(&res.outputs);
            stacked = Some(stack(stacked, &res.selection));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, rng: Option<&mut ModelRng>) -> Result<ForwardResult> {
        Ok(self.forward_cached(x, rng)?.0)
    }

    /// Forward pass. Passing an rng switches on training mode (dropout).
    pub fn forward_cached(
        &self,
        x: &Matrix,
        mut rng: Option<&mut ModelRng>,
    ) -> Result<(ForwardResult, ForwardCache)> {
        let cfg = &self.config;
        if x.ncols() != cfg.num_features {
            return invalid(format!(
                "model expects {} features, got {}",
                cfg.num_features,
                x.ncols()
            ));
        }
        let n = x.nrows();
        let t = self.temperature();
        let width = cfg.trees_per_layer * cfg.out_dim();
        let mut tree_outputs = Matrix::zeros((n, cfg.total_outputs()));
        let mut cache = ForwardCache {
            layers: Vec::with_capacity(self.layers.len()),
            prev_selections: Vec::with_capacity(self.layers.len()),
            output_masks: Vec::with_capacity(self.layers.len()),
            last_mask: None,
            attention_logits: Vec::with_capacity(self.layers.len()),
            temperature: t,
        };
        let mut stacked: Option<Selection> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let attn = self.attention[l].as_ref().map(|a| a.b.dot(&a.c));
            let prev = stacked.as_ref().map(|sel| PrevOutputs {
                values: tree_outputs.slice(s![.., ..l * width]),
                selection: sel,
            });
            let (mut res, layer_cache) =
                layer.forward(x.view(), prev, attn.as_ref().map(|a| a.view()), t)?;
            let mask = match rng.as_deref_mut() {
                Some(r) if cfg.output_dropout > 0.0 => {
                    let m = dropout_mask(n, width, cfg.output_dropout, r)?;
                    res.outputs *= &m;
                    Some(m)
                }
                _ => None,
            };
            tree_outputs
                .slice_mut(s![.., l * width..(l + 1) * width])
                .assign(&res.outputs);
            cache.prev_selections.push(stacked.clone());
            stacked = Some(stack(stacked, &res.selection));
            cache.layers.push(layer_cache);
            cache.output_masks.push(mask);
            cache.attention_logits.push(attn);
        }

        let last_mask = match rng {
            Some(r) if cfg.add_last_linear && cfg.last_dropout > 0.0 => Some(dropout_mask(
                self.last_linear.nrows(),
                self.last_linear.ncols(),
                cfg.last_dropout,
                r,
            )?),
            _ => None,
        };
        let mut response = match &last_mask {
            Some(m) => tree_outputs.dot(&(&self.last_linear * m)),
            None => tree_outputs.dot(&self.last_linear),
        };
        response += &self.bias;
        response += self.output_bias;
        cache.last_mask = last_mask;
        ensure_finite(&response, "model response")?;
        Ok((
            ForwardResult {
                response,
                tree_outputs,
            },
            cache,
        ))
    }

    /// Backpropagates `d_response` (and an optional direct gradient on the
    /// tree outputs) to every trainable tensor, in [`Self::params`] order.
    pub fn backward(
        &self,
        x: &Matrix,
        result: &ForwardResult,
        cache: &ForwardCache,
        d_response: &Matrix,
        d_tree_outputs: Option<&Matrix>,
    ) -> Result<Vec<Matrix>> {
        let cfg = &self.config;
        let width = cfg.trees_per_layer * cfg.out_dim();
        let effective_last = match &cache.last_mask {
            Some(m) => &self.last_linear * m,
            None => self.last_linear.clone(),
        };
        let mut d_x_p = d_response.dot(&effective_last.t());
        if let Some(extra) = d_tree_outputs {
            d_x_p += extra;
        }
        let mut d_last = result.tree_outputs.t().dot(d_response);
        if let Some(m) = &cache.last_mask {
            d_last *= m;
        }
        let d_bias = d_response.sum_axis(Axis(0)).insert_axis(Axis(0));

        let l_count = self.layers.len();
        let mut d_sel_later: Vec<Option<Selection>> = vec![None; l_count];
        let mut layer_grads = Vec::with_capacity(l_count);
        let mut attn_grads: Vec<Option<(Matrix, Matrix)>> = vec![None; l_count];
        for l in (0..l_count).rev() {
            let layer = &self.layers[l];
            let mut d_out = d_x_p.slice(s![.., l * width..(l + 1) * width]).to_owned();
            if let Some(m) = &cache.output_masks[l] {
                d_out *= m;
            }
            let prev_values = (l > 0).then(|| result.tree_outputs.slice(s![.., ..l * width]));
            let back = layer.backward(
                &cache.layers[l],
                x.view(),
                prev_values,
                cache.prev_selections[l].as_ref(),
                &d_out,
            )?;
            let mut grads = back.grads;
            let mut d_sel = back.selection;
            if let Some(later) = &d_sel_later[l] {
                d_sel.add_assign(later);
            }
            layer.selection_backward(
                &cache.layers[l].selection,
                &d_sel,
                cache.temperature,
                &mut grads,
            );
            if let Some(dv) = back.prev_values {
                let mut block = d_x_p.slice_mut(s![.., ..l * width]);
                block += &dv;
            }
            if let Some(dps) = back.prev_selection {
                let per = cfg.trees_per_layer;
                for (lp, slot) in d_sel_later.iter_mut().enumerate().take(l) {
                    let rows = s![lp * per..(lp + 1) * per, ..];
                    let part = Selection {
                        primary: dps.primary.slice(rows).to_owned(),
                        secondary: dps.secondary.as_ref().map(|m| m.slice(rows).to_owned()),
                    };
                    match slot {
                        Some(acc) => acc.add_assign(&part),
                        None => *slot = Some(part),
                    }
                }
            }
            if let (Some(da), Some(f)) = (back.attention, &self.attention[l]) {
                attn_grads[l] = Some((da.dot(&f.c.t()), f.b.t().dot(&da)));
            }
            layer_grads.push(grads);
        }
        layer_grads.reverse();

        let mut out = Vec::new();
        for g in layer_grads {
            out.push(g.feature_logits);
            if let Some(f2) = g.feature_logits2 {
                out.push(f2);
            }
            out.push(g.thresholds);
            out.push(g.log_slopes);
            out.push(g.responses);
        }
        for (l, f) in self.attention.iter().enumerate() {
            if let Some(f) = f {
                let (db, dc) = attn_grads[l].take().unwrap_or_else(|| {
                    (Matrix::zeros(f.b.raw_dim()), Matrix::zeros(f.c.raw_dim()))
                });
                out.push(db);
                out.push(dc);
            }
        }
        if cfg.add_last_linear {
            out.push(d_last);
            out.push(d_bias);
        }
        Ok(out)
    }

    /// Trainable tensors in a fixed order shared with gradients, optimizer
    /// state and the model file.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.feature_logits);
            if let Some(f2) = &layer.feature_logits2 {
                out.push(f2);
            }
            out.push(&layer.thresholds);
            out.push(&layer.log_slopes);
            out.push(&layer.responses);
        }
        for f in self.attention.iter().flatten() {
            out.push(&f.b);
            out.push(&f.c);
        }
        if self.config.add_last_linear {
            out.push(&self.last_linear);
            out.push(&self.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.feature_logits);
            if let Some(f2) = layer.feature_logits2.as_mut() {
                out.push(f2);
            }
            out.push(&mut layer.thresholds);
            out.push(&mut layer.log_slopes);
            out.push(&mut layer.responses);
        }
        for f in self.attention.iter_mut().flatten() {
            out.push(&mut f.b);
            out.push(&mut f.c);
        }
        if self.config.add_last_linear {
            out.push(&mut self.last_linear);
            out.push(&mut self.bias);
        }
        out
    }

    /// Whether each entry of [`Self::params`] belongs to the output head.
    pub fn head_params(&self) -> Vec<bool> {
        let n = self.params().len();
        let head = if self.config.add_last_linear { 2 } else { 0 };
        (0..n).map(|i| i + head >= n).collect()
    }

    /// Model output for inference (dropout off).
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, None)?.response)
    }

    /// `sigmoid(R)` for binary tasks.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if self.config.task != Task::Binary {
            return Err(Error::InvalidState(
                "probabilities are only defined for binary tasks".into(),
            ));
        }
        Ok(self.predict(x)?.mapv(sigmoid))
    }

    /// Feature dependencies of every tree. Only defined once annealing has
    /// finished and every selection is exactly one-hot.
    pub fn dependency_report(&self) -> Result<Vec<TreeDependency>> {
        if !self.is_annealed() {
            return Err(Error::InvalidState(format!(
                "model is not fully annealed (step {} of {})",
                self.step, self.config.anneal_steps
            )));
        }
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, (a, b)) in layer.hard_features().into_iter().enumerate() {
                out.push(TreeDependency {
                    layer: l,
                    tree: i,
                    features: std::iter::once(a).chain(b).collect(),
                });
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        if self.layers.len() != cfg.num_layers || self.attention.len() != cfg.num_layers {
            return Err(Error::Format(
                "layer count does not match the config".into(),
            ));
        }
        for layer in &self.layers {
            layer.validate()?;
            if layer.num_features != cfg.num_features
                || layer.num_trees != cfg.trees_per_layer
                || layer.depth != cfg.depth
                || layer.mode != cfg.mode
            {
                return Err(Error::Format(
                    "layer shape does not match the config".into(),
                ));
            }
        }
        if self.last_linear.dim() != (cfg.total_outputs(), cfg.num_outputs)
            || self.bias.dim() != (1, cfg.num_outputs)
        {
            return Err(Error::Format(
                "output head shape does not match the config".into(),
            ));
        }
        Ok(())
    }

    /// Draws a fresh model rng; kept here so callers do not depend on the
    /// concrete generator.
    pub fn rng(seed: u64) -> ModelRng {
        use rand::SeedableRng;
        ModelRng::seed_from_u64(seed)
    }
}

fn stack(acc: Option<Selection>, next: &Selection) -> Selection {
    match acc {
        None => next.clone(),
        Some(acc) => Selection {
            primary: ndarray::concatenate(Axis(0), &[acc.primary.view(), next.primary.view()])
                .unwrap(),
            secondary: match (acc.secondary, &next.secondary) {
                (Some(a), Some(b)) => {
                    Some(ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap())
                }
                _ => None,
            },
        },
    }
}
