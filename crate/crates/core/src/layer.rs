//! One layer of differentiable oblivious decision trees.
//!
//! Each tree softly picks one feature (GAM) or two alternating features
//! (GA²M), optionally adds a gated mixture of previous layers' tree outputs
//! that depend on the same feature set, and routes the resulting scalar
//! through `depth` entmoid splits into `2^depth` leaf responses.
//!
//! Leaf indexing: depth 0 is the most significant bit, and bit value 0 means
//! the `H` branch (`entmoid((K - b) / s)`), bit 1 the `1 - H` branch.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numeric::{entmax15_into, entmax15_vjp_into, entmoid15, entmoid15_grad, Matrix};

/// Gate sums below this are treated as "no previous tree shares the feature".
pub const GATE_EPS: f64 = 1e-12;

/// Rows processed per parallel work item. Fixed so that reductions happen in
/// the same order regardless of thread count.
const ROW_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Gam,
    Ga2m,
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub mode: Mode,
    pub num_trees: usize,
    pub depth: usize,
    pub num_features: usize,
    pub out_dim: usize,
    pub colsample: f64,
}

/// Parameters of `num_trees` oblivious trees.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeLayer {
    pub mode: Mode,
    pub num_trees: usize,
    pub depth: usize,
    pub num_features: usize,
    pub out_dim: usize,
    /// Feature-selection logits `[I × D]`; the only logits in GAM mode and
    /// the odd-depth logits in GA²M mode.
    pub feature_logits: Matrix,
    /// Even-depth logits `[I × D]` (GA²M only).
    pub feature_logits2: Option<Matrix>,
    /// `true` where a tree may select the feature. Excluded features behave as
    /// logit `-inf` in both logit matrices.
    pub feature_mask: Array2<bool>,
    pub thresholds: Matrix,
    /// Log of the split slope, so slopes stay strictly positive.
    pub log_slopes: Matrix,
    /// Leaf responses `[I × 2^C·d_out]`, column `leaf * d_out + k`.
    pub responses: Matrix,
}

/// Per-tree feature selections (rows are entmax outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub primary: Matrix,
    pub secondary: Option<Matrix>,
}

impl Selection {
    pub fn zeros_like(&self) -> Selection {
        Selection {
            primary: Matrix::zeros(self.primary.raw_dim()),
            secondary: self.secondary.as_ref().map(|m| Matrix::zeros(m.raw_dim())),
        }
    }

    pub fn add_assign(&mut self, other: &Selection) {
        self.primary += &other.primary;
        if let (Some(a), Some(b)) = (self.secondary.as_mut(), other.secondary.as_ref()) {
            *a += b;
        }
    }
}

/// Outputs of all previous layers that feed the gated mixture.
pub struct PrevOutputs<'a> {
    /// `[N × P]`, P = previous trees × out_dim, post-dropout.
    pub values: ArrayView2<'a, f64>,
    /// Selections of the previous trees, `[P / out_dim × D]`.
    pub selection: &'a Selection,
}

#[derive(Clone, Debug)]
pub struct LayerForwardResult {
    /// `[N × I·d_out]`, column `i * d_out + k`.
    pub outputs: Matrix,
    pub selection: Selection,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    temperature: f64,
    pub selection: Selection,
    gate: Option<GateCache>,
    /// Entmoid arguments `[N × I × C]`.
    split_args: Vec<f64>,
    /// Mixed scalars `K¹` (and `K²` for GA²M), `[N × I]`.
    pub mixed: Matrix,
    pub mixed2: Option<Matrix>,
    rows: usize,
}

#[derive(Clone, Debug)]
struct GateCache {
    /// Tree-level gates `[P_t × I]` (GA²M: before the cap).
    raw: Matrix,
    /// GA²M dot products `G¹ᵢ·G¹ₚ, G²ᵢ·G²ₚ, G¹ᵢ·G²ₚ, G²ᵢ·G¹ₚ` as `[P_t × I]`.
    pair_dots: Option<[Matrix; 4]>,
    /// Channel-level mixing weights `g'` `[P × I]`.
    weights: Matrix,
    /// Per-tree normalizer (plain) and open flag.
    sums: Vec<f64>,
    open: Vec<bool>,
    /// Attention probabilities `[P × I]` when attention is used.
    attention: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub feature_logits: Matrix,
    pub feature_logits2: Option<Matrix>,
    pub thresholds: Matrix,
    pub log_slopes: Matrix,
    pub responses: Matrix,
}

/// Gradients leaving a layer's backward pass.
pub struct LayerBackward {
    /// Gradients of thresholds, slopes and responses; logit gradients are
    /// zero here and filled in by [`TreeLayer::selection_backward`].
    pub grads: LayerGrads,
    /// Gradient w.r.t. this layer's own selection.
    pub selection: Selection,
    pub prev_values: Option<Matrix>,
    pub prev_selection: Option<Selection>,
    pub attention: Option<Matrix>,
}

/// Number of features each tree keeps under column subsampling.
pub fn kept_features(num_features: usize, colsample: f64) -> usize {
    let n = (num_features as f64 * colsample - 1e-9).ceil() as usize;
    n.clamp(1, num_features)
}

/// Soft feature choice `entmax15(F / T)`; exact one-hot at `T = 0`.
pub fn choice(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    entmax15_into(logits, temperature, &mut out)?;
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// GAM gate: `g_p = ⟨G_prev[p], G_i⟩`.
pub fn gam_gate(prev: &Matrix, current: &[f64]) -> Vec<f64> {
    prev.as_standard_layout()
        .rows()
        .into_iter()
        .map(|row| dot(row.as_slice().unwrap(), current))
        .collect()
}

/// GA²M gate over unordered feature pairs, capped at 1.
pub fn ga2m_gate(g1: &[f64], g2: &[f64], prev1: &Matrix, prev2: &Matrix) -> Vec<f64> {
    let (prev1, prev2) = (prev1.as_standard_layout(), prev2.as_standard_layout());
    prev1
        .rows()
        .into_iter()
        .zip(prev2.rows())
        .map(|(p1, p2)| {
            let (p1, p2) = (p1.as_slice().unwrap(), p2.as_slice().unwrap());
            (dot(g1, p1) * dot(g2, p2) + dot(g1, p2) * dot(g2, p1)).min(1.0)
        })
        .collect()
}

impl TreeLayer {
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<TreeLayer> {
        if !(spec.colsample > 0.0 && spec.colsample <= 1.0) {
            return invalid(format!(
                "colsample must lie in (0, 1], got {}",
                spec.colsample
            ));
        }
        if spec.num_features == 0 || spec.num_trees == 0 || spec.out_dim == 0 {
            return invalid("layer needs at least one feature, tree and output channel");
        }
        let min_depth = if spec.mode == Mode::Ga2m { 2 } else { 1 };
        if spec.depth < min_depth {
            return invalid(format!(
                "depth {} is below the minimum {min_depth} for {:?}",
                spec.depth, spec.mode
            ));
        }
        let (i, d, c) = (spec.num_trees, spec.num_features, spec.depth);
        let keep = kept_features(d, spec.colsample);
        let mut mask = Array2::from_elem((i, d), false);
        let mut order: Vec<usize> = (0..d).collect();
        for mut row in mask.rows_mut() {
            order.shuffle(rng);
            for &j in &order[..keep] {
                row[j] = true;
            }
        }
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let mut logits = || Array2::from_shape_simple_fn((i, d), || std_normal.sample(rng));
        let feature_logits = logits();
        let feature_logits2 = (spec.mode == Mode::Ga2m).then(&mut logits);
        let leaves = 1usize << c;
        let w_dist = Normal::new(0.0, 1.0 / (leaves as f64).sqrt()).unwrap();
        let responses =
            Array2::from_shape_simple_fn((i, leaves * spec.out_dim), || w_dist.sample(rng));
        Ok(TreeLayer {
            mode: spec.mode,
            num_trees: i,
            depth: c,
            num_features: d,
            out_dim: spec.out_dim,
            feature_logits,
            feature_logits2,
            feature_mask: mask,
            thresholds: Matrix::zeros((i, c)),
            log_slopes: Matrix::zeros((i, c)),
            responses,
        })
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn output_width(&self) -> usize {
        self.num_trees * self.out_dim
    }

    /// Logits with excluded features set to `-inf`.
    pub fn masked_logits(&self, second: bool) -> Matrix {
        let src = if second {
            self.feature_logits2.as_ref().expect("GA2M layer")
        } else {
            &self.feature_logits
        };
        let mut out = src.clone();
        out.zip_mut_with(&self.feature_mask, |v, &keep| {
            if !keep {
                *v = f64::NEG_INFINITY
            }
        });
        out
    }

    pub fn selection(&self, temperature: f64) -> Result<Selection> {
        let select = |second: bool| -> Result<Matrix> {
            let logits = self.masked_logits(second);
            let mut out = Matrix::zeros(logits.raw_dim());
            for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
                entmax15_into(
                    src.as_slice().unwrap(),
                    temperature,
                    dst.as_slice_mut().unwrap(),
                )?;
            }
            Ok(out)
        };
        Ok(Selection {
            primary: select(false)?,
            secondary: match self.mode {
                Mode::Gam => None,
                Mode::Ga2m => Some(select(true)?),
            },
        })
    }

    /// Which mixed scalar feeds depth `c`: GA²M alternates `K¹, K², K¹, ...`.
    #[inline]
    fn depth_source(&self, c: usize) -> usize {
        match self.mode {
            Mode::Gam => 0,
            Mode::Ga2m => c % 2,
        }
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        prev: Option<PrevOutputs>,
        attention: Option<ArrayView2<f64>>,
        temperature: f64,
    ) -> Result<(LayerForwardResult, LayerCache)> {
        if x.ncols() != self.num_features {
            return invalid(format!(
                "layer expects {} features, got {}",
                self.num_features,
                x.ncols()
            ));
        }
        let n = x.nrows();
        let selection = self.selection(temperature)?;
        let mut mixed = x.dot(&selection.primary.t());
        let mut mixed2 = selection.secondary.as_ref().map(|g2| x.dot(&g2.t()));

        let gate = match prev {
            None => None,
            Some(prev) => {
                if prev.values.nrows() != n {
                    return invalid("previous outputs have a different batch size");
                }
                let gate = self.gate_forward(&prev, attention, &selection)?;
                let carried = prev.values.dot(&gate.weights);
                mixed += &carried;
                if let Some(m2) = mixed2.as_mut() {
                    *m2 += &carried;
                }
                Some(gate)
            }
        };

        let (i_count, c, d_out) = (self.num_trees, self.depth, self.out_dim);
        let width = i_count * d_out;
        let inv_slopes = self.log_slopes.mapv(|v| (-v).exp());
        let mut outputs = vec![0.0; n * width];
        let mut split_args = vec![0.0; n * i_count * c];
        let leaves = self.num_leaves();

        outputs
            .par_chunks_mut(ROW_CHUNK * width)
            .zip(split_args.par_chunks_mut(ROW_CHUNK * i_count * c))
            .enumerate()
            .for_each(|(chunk, (out_rows, arg_rows))| {
                let mut pre = vec![0.0; 2 * leaves];
                let row0 = chunk * ROW_CHUNK;
                for r in 0..out_rows.len() / width {
                    let row = row0 + r;
                    for i in 0..i_count {
                        let k = [
                            mixed[[row, i]],
                            mixed2.as_ref().map_or(0.0, |m| m[[row, i]]),
                        ];
                        let args = &mut arg_rows[(r * i_count + i) * c..(r * i_count + i + 1) * c];
                        for (cc, a) in args.iter_mut().enumerate() {
                            *a = (k[self.depth_source(cc)] - self.thresholds[[i, cc]])
                                * inv_slopes[[i, cc]];
                        }
                        leaf_weights(args, &mut pre);
                        let e = &pre[leaves - 1..2 * leaves - 1];
                        let w = self.responses.row(i);
                        let w = w.as_slice().unwrap();
                        let out = &mut out_rows[r * width + i * d_out..r * width + (i + 1) * d_out];
                        for (leaf, &p) in e.iter().enumerate() {
                            if p != 0.0 {
                                for (o, &wv) in
                                    out.iter_mut().zip(&w[leaf * d_out..(leaf + 1) * d_out])
                                {
                                    *o += p * wv;
                                }
                            }
                        }
                    }
                }
            });

        let outputs = Matrix::from_shape_vec((n, width), outputs).unwrap();
        let cache = LayerCache {
            temperature,
            selection: selection.clone(),
            gate,
            split_args,
            mixed,
            mixed2,
            rows: n,
        };
        Ok((LayerForwardResult { outputs, selection }, cache))
    }

    fn gate_forward(
        &self,
        prev: &PrevOutputs,
        attention: Option<ArrayView2<f64>>,
        selection: &Selection,
    ) -> Result<GateCache> {
        let d_out = self.out_dim;
        let p_ch = prev.values.ncols();
        let p_trees = prev.selection.primary.nrows();
        if p_trees * d_out != p_ch {
            return invalid(format!(
                "previous outputs ({p_ch} columns) do not match {p_trees} trees × {d_out} channels"
            ));
        }
        let (raw, pair_dots) = match self.mode {
            Mode::Gam => (prev.selection.primary.dot(&selection.primary.t()), None),
            Mode::Ga2m => {
                let (g1, g2) = (&selection.primary, selection.secondary.as_ref().unwrap());
                let (p1, p2) = (
                    &prev.selection.primary,
                    prev.selection.secondary.as_ref().unwrap(),
                );
                let u = p1.dot(&g1.t());
                let v = p2.dot(&g2.t());
                let w = p2.dot(&g1.t());
                let z = p1.dot(&g2.t());
                let raw = &u * &v + &w * &z;
                (raw, Some([u, v, w, z]))
            }
        };
        let capped = raw.mapv(|v| v.min(1.0));

        let mut weights = Matrix::zeros((p_ch, self.num_trees));
        let mut sums = vec![0.0; self.num_trees];
        let mut open = vec![false; self.num_trees];
        let mut attn_probs = attention
            .as_ref()
            .map(|_| Matrix::zeros((p_ch, self.num_trees)));
        if let Some(a) = attention.as_ref() {
            if a.dim() != (p_ch, self.num_trees) {
                return invalid(format!(
                    "attention logits must be [{p_ch} × {}]",
                    self.num_trees
                ));
            }
        }
        let mut logits = vec![0.0; p_ch];
        let mut probs = vec![0.0; p_ch];
        for i in 0..self.num_trees {
            let gate = |p: usize| capped[[p / d_out, i]];
            let sum: f64 = (0..p_ch).map(gate).sum();
            sums[i] = sum;
            if sum < GATE_EPS {
                continue;
            }
            open[i] = true;
            match (attention.as_ref(), attn_probs.as_mut()) {
                (Some(a), Some(q)) => {
                    for p in 0..p_ch {
                        let g = gate(p);
                        logits[p] = if g > 0.0 {
                            g.ln() + a[[p, i]]
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    entmax15_into(&logits, 1.0, &mut probs)?;
                    for p in 0..p_ch {
                        q[[p, i]] = probs[p];
                        weights[[p, i]] = gate(p) * probs[p];
                    }
                }
                _ => {
                    for p in 0..p_ch {
                        weights[[p, i]] = gate(p) / sum;
                    }
                }
            }
        }
        Ok(GateCache {
            raw,
            pair_dots,
            weights,
            sums,
            open,
            attention: attn_probs,
        })
    }

    pub fn backward(
        &self,
        cache: &LayerCache,
        x: ArrayView2<f64>,
        prev: Option<ArrayView2<f64>>,
        prev_selection: Option<&Selection>,
        d_outputs: &Matrix,
    ) -> Result<LayerBackward> {
        let n = cache.rows;
        let (i_count, c, d_out) = (self.num_trees, self.depth, self.out_dim);
        let width = i_count * d_out;
        let leaves = self.num_leaves();
        if d_outputs.dim() != (n, width) {
            return invalid("output gradient has the wrong shape");
        }
        let inv_slopes = self.log_slopes.mapv(|v| (-v).exp());
        let two_sources = self.mode == Mode::Ga2m;
        let d_outputs = d_outputs.as_standard_layout();
        let d_out_slice = d_outputs.as_slice().unwrap();

        struct Partial {
            thresholds: Vec<f64>,
            log_slopes: Vec<f64>,
            responses: Vec<f64>,
        }
        let mut d_mixed = vec![0.0; n * i_count * 2];
        let partials: Vec<Partial> = d_mixed
            .par_chunks_mut(ROW_CHUNK * i_count * 2)
            .enumerate()
            .map(|(chunk, dk_rows)| {
                let mut part = Partial {
                    thresholds: vec![0.0; i_count * c],
                    log_slopes: vec![0.0; i_count * c],
                    responses: vec![0.0; i_count * leaves * d_out],
                };
                let mut pre = vec![0.0; 2 * leaves];
                let mut suf = vec![0.0; leaves];
                let row0 = chunk * ROW_CHUNK;
                for r in 0..dk_rows.len() / (i_count * 2) {
                    let row = row0 + r;
                    for i in 0..i_count {
                        let dh =
                            &d_out_slice[row * width + i * d_out..row * width + (i + 1) * d_out];
                        if dh.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        let args =
                            &cache.split_args[(row * i_count + i) * c..(row * i_count + i + 1) * c];
                        leaf_weights(args, &mut pre);
                        let w = self.responses.row(i);
                        let w = w.as_slice().unwrap();
                        let dw = &mut part.responses[i * leaves * d_out..(i + 1) * leaves * d_out];
                        for leaf in 0..leaves {
                            let e = pre[leaves - 1 + leaf];
                            let mut de = 0.0;
                            for k in 0..d_out {
                                de += dh[k] * w[leaf * d_out + k];
                                dw[leaf * d_out + k] += e * dh[k];
                            }
                            suf[leaf] = de;
                        }
                        // Contract the leaf gradient level by level, deepest first.
                        for cc in (0..c).rev() {
                            let hv = entmoid15(args[cc]);
                            let width_c = 1usize << cc;
                            let level = &pre[width_c - 1..2 * width_c - 1];
                            let mut d_h = 0.0;
                            for j in 0..width_c {
                                let (a, b) = (suf[2 * j], suf[2 * j + 1]);
                                d_h += level[j] * (a - b);
                                suf[j] = a * hv + b * (1.0 - hv);
                            }
                            let dz = d_h * entmoid15_grad(args[cc]);
                            if dz == 0.0 {
                                continue;
                            }
                            let inv_s = inv_slopes[[i, cc]];
                            part.thresholds[i * c + cc] -= dz * inv_s;
                            part.log_slopes[i * c + cc] -= dz * args[cc];
                            let src = if two_sources { cc % 2 } else { 0 };
                            dk_rows[(r * i_count + i) * 2 + src] += dz * inv_s;
                        }
                    }
                }
                part
            })
            .collect();

        let mut grads = LayerGrads {
            feature_logits: Matrix::zeros(self.feature_logits.raw_dim()),
            feature_logits2: self
                .feature_logits2
                .as_ref()
                .map(|m| Matrix::zeros(m.raw_dim())),
            thresholds: Matrix::zeros((i_count, c)),
            log_slopes: Matrix::zeros((i_count, c)),
            responses: Matrix::zeros(self.responses.raw_dim()),
        };
        for part in &partials {
            add_slice(grads.thresholds.as_slice_mut().unwrap(), &part.thresholds);
            add_slice(grads.log_slopes.as_slice_mut().unwrap(), &part.log_slopes);
            add_slice(grads.responses.as_slice_mut().unwrap(), &part.responses);
        }

        let d_mixed = Array2::from_shape_vec((n * i_count, 2), d_mixed).unwrap();
        let dk1 = d_mixed
            .column(0)
            .to_owned()
            .into_shape((n, i_count))
            .unwrap();
        let dk2 = d_mixed
            .column(1)
            .to_owned()
            .into_shape((n, i_count))
            .unwrap();

        let mut d_selection = Selection {
            primary: dk1.t().dot(&x),
            secondary: two_sources.then(|| dk2.t().dot(&x)),
        };

        let mut out = LayerBackward {
            grads,
            selection: Selection::zeros_like(&d_selection),
            prev_values: None,
            prev_selection: None,
            attention: None,
        };

        if let (Some(gate), Some(prev_values), Some(prev_sel)) =
            (cache.gate.as_ref(), prev, prev_selection)
        {
            let dk_total = if two_sources { &dk1 + &dk2 } else { dk1 };
            out.prev_values = Some(dk_total.dot(&gate.weights.t()));
            let d_weights = prev_values.t().dot(&dk_total);
            let (d_gate, d_attention) = self.gate_weights_backward(gate, &d_weights)?;
            out.attention = d_attention;
            let (d_own, d_prev) = self.gate_backward(gate, &cache.selection, prev_sel, &d_gate);
            d_selection.add_assign(&d_own);
            out.prev_selection = Some(d_prev);
        }
        out.selection = d_selection;
        Ok(out)
    }

    /// Backpropagates through the normalization or attention that turns
    /// gates into mixing weights. Returns the tree-level gate gradient
    /// (w.r.t. the capped gate) and the attention-logit gradient.
    fn gate_weights_backward(
        &self,
        gate: &GateCache,
        d_weights: &Matrix,
    ) -> Result<(Matrix, Option<Matrix>)> {
        let d_out = self.out_dim;
        let (p_ch, i_count) = d_weights.dim();
        let mut d_gate_ch = Matrix::zeros((p_ch, i_count));
        let mut d_attn = gate
            .attention
            .as_ref()
            .map(|_| Matrix::zeros((p_ch, i_count)));
        let capped = |p: usize, i: usize| gate.raw[[p / d_out, i]].min(1.0);
        let mut dq = vec![0.0; p_ch];
        let mut probs = vec![0.0; p_ch];
        let mut dlogits = vec![0.0; p_ch];
        for i in 0..i_count {
            if !gate.open[i] {
                continue;
            }
            match (gate.attention.as_ref(), d_attn.as_mut()) {
                (Some(q), Some(da)) => {
                    for p in 0..p_ch {
                        let g = capped(p, i);
                        probs[p] = q[[p, i]];
                        dq[p] = d_weights[[p, i]] * g;
                        d_gate_ch[[p, i]] = d_weights[[p, i]] * probs[p];
                    }
                    entmax15_vjp_into(&probs, &dq, 1.0, &mut dlogits);
                    for p in 0..p_ch {
                        da[[p, i]] = dlogits[p];
                        let g = capped(p, i);
                        if g > 0.0 {
                            d_gate_ch[[p, i]] += dlogits[p] / g;
                        }
                    }
                }
                _ => {
                    let sum = gate.sums[i];
                    let inner: f64 = (0..p_ch)
                        .map(|p| d_weights[[p, i]] * gate.weights[[p, i]])
                        .sum();
                    for p in 0..p_ch {
                        d_gate_ch[[p, i]] = (d_weights[[p, i]] - inner) / sum;
                    }
                }
            }
        }
        let p_trees = p_ch / d_out;
        let mut d_gate = Matrix::zeros((p_trees, i_count));
        for p in 0..p_ch {
            let mut row = d_gate.row_mut(p / d_out);
            row += &d_gate_ch.row(p);
        }
        Ok((d_gate, d_attn))
    }

    /// Backpropagates gate gradients into the current and previous selections.
    fn gate_backward(
        &self,
        gate: &GateCache,
        own: &Selection,
        prev: &Selection,
        d_gate: &Matrix,
    ) -> (Selection, Selection) {
        match self.mode {
            Mode::Gam => (
                Selection {
                    primary: d_gate.t().dot(&prev.primary),
                    secondary: None,
                },
                Selection {
                    primary: d_gate.dot(&own.primary),
                    secondary: None,
                },
            ),
            Mode::Ga2m => {
                let [u, v, w, z] = gate.pair_dots.as_ref().unwrap();
                let mut dg = d_gate.clone();
                dg.zip_mut_with(&gate.raw, |d, &r| {
                    if r >= 1.0 {
                        *d = 0.0
                    }
                });
                let (du, dv, dw, dz) = (&dg * v, &dg * u, &dg * z, &dg * w);
                let (g1, g2) = (&own.primary, own.secondary.as_ref().unwrap());
                let (p1, p2) = (&prev.primary, prev.secondary.as_ref().unwrap());
                let own_grad = Selection {
                    primary: du.t().dot(p1) + dw.t().dot(p2),
                    secondary: Some(dv.t().dot(p2) + dz.t().dot(p1)),
                };
                let prev_grad = Selection {
                    primary: du.dot(g1) + dz.dot(g2),
                    secondary: Some(dv.dot(g2) + dw.dot(g1)),
                };
                (own_grad, prev_grad)
            }
        }
    }

    /// Turns selection gradients into logit gradients (zero at `T = 0`).
    pub fn selection_backward(
        &self,
        selection: &Selection,
        d_selection: &Selection,
        temperature: f64,
        grads: &mut LayerGrads,
    ) {
        if temperature == 0.0 {
            return;
        }
        let vjp = |sel: &Matrix, d: &Matrix, out: &mut Matrix| {
            let (sel, d) = (sel.as_standard_layout(), d.as_standard_layout());
            for ((s_row, d_row), mut o_row) in
                sel.rows().into_iter().zip(d.rows()).zip(out.rows_mut())
            {
                entmax15_vjp_into(
                    s_row.as_slice().unwrap(),
                    d_row.as_slice().unwrap(),
                    temperature,
                    o_row.as_slice_mut().unwrap(),
                );
            }
        };
        vjp(
            &selection.primary,
            &d_selection.primary,
            &mut grads.feature_logits,
        );
        if let (Some(s2), Some(d2), Some(o2)) = (
            selection.secondary.as_ref(),
            d_selection.secondary.as_ref(),
            grads.feature_logits2.as_mut(),
        ) {
            vjp(s2, d2, o2);
        }
    }

    /// Sets each split threshold to a random quantile of the mixed scalar it
    /// compares against, taken over a data batch.
    pub fn init_thresholds_from_data<R: Rng + ?Sized>(&mut self, cache: &LayerCache, rng: &mut R) {
        let n = cache.rows;
        if n == 0 {
            return;
        }
        let sorted_cols = |m: &Matrix| -> Vec<Vec<f64>> {
            m.axis_iter(Axis(1))
                .map(|col| {
                    let mut v = col.to_vec();
                    v.sort_by(f64::total_cmp);
                    v
                })
                .collect()
        };
        let k1 = sorted_cols(&cache.mixed);
        let k2 = cache.mixed2.as_ref().map(sorted_cols);
        for i in 0..self.num_trees {
            for c in 0..self.depth {
                let col = match (self.depth_source(c), k2.as_ref()) {
                    (1, Some(k2)) => &k2[i],
                    _ => &k1[i],
                };
                let q: f64 = rng.gen();
                self.thresholds[[i, c]] = quantile_sorted(col, q);
            }
        }
    }

    /// Checks the shape and sign invariants of the parameters.
    pub fn validate(&self) -> Result<()> {
        let (i, d, c) = (self.num_trees, self.num_features, self.depth);
        let ok = self.feature_logits.dim() == (i, d)
            && self.feature_mask.dim() == (i, d)
            && self.thresholds.dim() == (i, c)
            && self.log_slopes.dim() == (i, c)
            && self.responses.dim() == (i, (1 << c) * self.out_dim)
            && match self.mode {
                Mode::Gam => self.feature_logits2.is_none(),
                Mode::Ga2m => {
                    self.feature_logits2.as_ref().map(|m| m.dim()) == Some((i, d)) && c >= 2
                }
            };
        if !ok {
            return invalid("tree layer parameters have inconsistent shapes");
        }
        if self
            .feature_mask
            .rows()
            .into_iter()
            .any(|r| !r.iter().any(|v| *v))
        {
            return invalid("a tree has every feature excluded");
        }
        Ok(())
    }

    /// Feature(s) each tree depends on once selections are one-hot.
    pub fn hard_features(&self) -> Vec<(usize, Option<usize>)> {
        let pick = |m: &Matrix| -> Vec<usize> {
            m.rows()
                .into_iter()
                .map(|r| crate::numeric::argmax(r.as_slice().unwrap()).expect("non-empty mask"))
                .collect()
        };
        let first = pick(&self.masked_logits(false));
        match self.mode {
            Mode::Gam => first.into_iter().map(|j| (j, None)).collect(),
            Mode::Ga2m => {
                let second = pick(&self.masked_logits(true));
                first
                    .into_iter()
                    .zip(second)
                    .map(|(a, b)| (a, Some(b)))
                    .collect()
            }
        }
    }

    /// Debug view of the gating weights for the current forward cache.
    pub fn mixing_weights<'a>(&self, cache: &'a LayerCache) -> Option<&'a Matrix> {
        cache.gate.as_ref().map(|g| &g.weights)
    }

    /// Open flags per tree (at least one previous tree shares the feature set).
    pub fn open_gates<'a>(&self, cache: &'a LayerCache) -> Option<&'a [bool]> {
        cache.gate.as_ref().map(|g| g.open.as_slice())
    }
}

impl LayerCache {
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Hash of every piecewise regime the forward pass went through: entmoid
    /// saturation, entmax supports and the GA²M gate cap. Two points with the
    /// same signature lie on the same smooth piece.
    pub fn signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for a in &self.split_args {
            ((*a >= 2.0) as u8 + 2 * (*a <= -2.0) as u8).hash(&mut h);
        }
        let support = |m: &Matrix, h: &mut std::collections::hash_map::DefaultHasher| {
            for v in m.iter() {
                (*v > 0.0).hash(h);
            }
        };
        support(&self.selection.primary, &mut h);
        if let Some(s) = &self.selection.secondary {
            support(s, &mut h);
        }
        if let Some(g) = &self.gate {
            for v in g.raw.iter() {
                (*v >= 1.0).hash(&mut h);
                (*v > 0.0).hash(&mut h);
            }
            if let Some(q) = &g.attention {
                support(q, &mut h);
            }
        }
        h.finish()
    }
}

/// Fills `pre` with the per-level prefix products of the tree: level `c`
/// occupies `pre[2^c - 1 .. 2^(c+1) - 1]`, and the last level holds the leaf
/// probabilities `e`.
#[inline]
fn leaf_weights(split_args: &[f64], pre: &mut [f64]) {
    pre[0] = 1.0;
    for (c, &a) in split_args.iter().enumerate() {
        let hv = entmoid15(a);
        let width = 1usize << c;
        let (head, tail) = pre.split_at_mut(2 * width - 1);
        let level = &head[width - 1..];
        let next = &mut tail[..2 * width];
        for j in 0..width {
            let p = level[j];
            next[2 * j] = p * hv;
            next[2 * j + 1] = p * (1.0 - hv);
        }
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Linear-interpolated quantile of an ascending slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Runs a layer on a fresh batch without keeping the cache.
pub fn layer_outputs(layer: &TreeLayer, x: ArrayView2<f64>, temperature: f64) -> Result<Matrix> {
    Ok(layer.forward(x, None, None, temperature)?.0.outputs)
}
