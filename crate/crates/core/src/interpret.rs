//! Shape functions and interaction surfaces from trained models.
//!
//! Explanations live in raw feature units. Main effects are tabulated on a
//! per-feature binning, pairwise surfaces on the product of two binnings.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::network::{NodeGamModel, Term};
use crate::numeric::Matrix;
use crate::preprocess::Pipeline;

pub const DEFAULT_BINS: usize = 256;
pub const ADDITIVITY_TOL: f64 = 1e-6;
pub const PURIFY_TOL: f64 = 1e-10;
pub const PURIFY_MAX_SWEEPS: usize = 500;
const PROBE_BASELINES: usize = 10;
const PROBE_GRID: usize = 16;
const EVAL_CHUNK: usize = 4096;

/// Quantile binning of one feature. A value `x` falls into the first bin
/// whose upper edge is `>= x` (the last bin takes everything above).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub edges: Vec<f64>,
    /// Within-bin data mean.
    pub representatives: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Binning {
    /// At most `max_bins` bins; every unique value gets its own bin when
    /// there are few enough of them. Ties never straddle a bin boundary.
    pub fn fit(values: &[f64], max_bins: usize) -> Result<Binning> {
        if values.is_empty() {
            return invalid("cannot bin an empty column");
        }
        if max_bins == 0 {
            return invalid("need at least one bin");
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut uniq: Vec<(f64, usize)> = Vec::new();
        for v in sorted {
            match uniq.last_mut() {
                Some((u, c)) if *u == v => *c += 1,
                _ => uniq.push((v, 1)),
            }
        }
        let n = values.len() as f64;
        let mut b = Binning {
            edges: Vec::new(),
            representatives: Vec::new(),
            counts: Vec::new(),
        };
        if uniq.len() <= max_bins {
            for (v, c) in uniq {
                b.edges.push(v);
                b.representatives.push(v);
                b.counts.push(c as f64);
            }
            return Ok(b);
        }
        let (mut sum, mut count, mut seen) = (0.0, 0usize, 0usize);
        for (i, &(v, c)) in uniq.iter().enumerate() {
            sum += v * c as f64;
            count += c;
            seen += c;
            let target = (b.edges.len() + 1) as f64 * n / max_bins as f64;
            if seen as f64 >= target - 1e-9 || i + 1 == uniq.len() {
                b.edges.push(v);
                b.representatives.push(sum / count as f64);
                b.counts.push(count as f64);
                sum = 0.0;
                count = 0;
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        self.edges
            .partition_point(|e| *e < x)
            .min(self.edges.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFunction {
    pub feature: usize,
    pub name: String,
    pub bins: Binning,
    /// `f_j` at each bin representative.
    pub values: Vec<f64>,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSurface {
    pub features: (usize, usize),
    pub names: (String, String),
    /// Row-major `[bins of first × bins of second]`.
    pub values: Vec<Vec<f64>>,
    /// Data counts per cell.
    pub counts: Vec<Vec<f64>>,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GamExplanation {
    pub intercept: f64,
    pub shapes: Vec<ShapeFunction>,
    pub interactions: Vec<InteractionSurface>,
}

impl GamExplanation {
    /// `f0 + Σ f_j + Σ f_jk` at the bins each row falls into.
    pub fn predict(&self, raw: &Matrix) -> Result<Vec<f64>> {
        if raw.ncols() != self.shapes.len() {
            return invalid("row width does not match the explanation");
        }
        Ok(raw
            .rows()
            .into_iter()
            .map(|row| {
                let bins: Vec<usize> = self
                    .shapes
                    .iter()
                    .map(|s| s.bins.bin_of(row[s.feature]))
                    .collect();
                let mains: f64 = self
                    .shapes
                    .iter()
                    .zip(&bins)
                    .map(|(s, &b)| s.values[b])
                    .sum();
                let pairs: f64 = self
                    .interactions
                    .iter()
                    .map(|p| p.values[bins[p.features.0]][bins[p.features.1]])
                    .sum();
                self.intercept + mains + pairs
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Recomputes importances and orders interactions by importance,
    /// largest first.
    pub fn update_importance(&mut self) {
        for s in &mut self.shapes {
            s.importance = importance(&s.values, &s.bins.counts);
        }
        for p in &mut self.interactions {
            let flat: Vec<f64> = p.values.iter().flatten().copied().collect();
            let counts: Vec<f64> = p.counts.iter().flatten().copied().collect();
            p.importance = importance(&flat, &counts);
        }
        self.interactions.sort_by(|a, b| {
            b.importance
                .total_cmp(&a.importance)
                .then(a.features.cmp(&b.features))
        });
    }
}

/// Count-weighted mean absolute value.
pub fn importance(values: &[f64], counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    values
        .iter()
        .zip(counts)
        .map(|(v, c)| v.abs() * c)
        .sum::<f64>()
        / total
}

fn column(data: &Matrix, j: usize) -> Vec<f64> {
    data.column(j).to_vec()
}

fn default_names(d: usize, names: &[String]) -> Vec<String> {
    (0..d)
        .map(|j| names.get(j).cloned().unwrap_or_else(|| format!("x{j}")))
        .collect()
}

/// Shape functions of an additive black box by output differencing:
/// `f_j(v) = predict(baseline with x_j = v) - predict(baseline)` over every
/// unique value of feature `j`, then centered into the intercept.
///
/// Before tabulating, the differences are recomputed from ten other
/// baselines drawn from `data`; any gap above 1e-6 means the model is not
/// additive.
pub fn extract_gam_shapes(
    predict: &dyn Fn(&Matrix) -> Result<Vec<f64>>,
    data: &Matrix,
    baseline: &[f64],
    names: &[String],
    seed: u64,
) -> Result<GamExplanation> {
    let (n, d) = data.dim();
    if n == 0 {
        return invalid("no data to explain");
    }
    if baseline.len() != d {
        return invalid("baseline width does not match the data");
    }
    let names = default_names(d, names);
    let base_row = Matrix::from_shape_vec((1, d), baseline.to_vec()).unwrap();
    let base_value = predict(&base_row)?[0];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<usize> = sample(&mut rng, n, PROBE_BASELINES.min(n)).into_vec();

    let mut shapes = Vec::with_capacity(d);
    for j in 0..d {
        let bins = Binning::fit(&column(data, j), usize::MAX)?;
        let grid = &bins.representatives;
        let mut rows = Matrix::from_shape_fn((grid.len(), d), |(_, k)| baseline[k]);
        rows.column_mut(j)
            .assign(&ndarray::Array1::from(grid.clone()));
        let values: Vec<f64> = predict(&rows)?
            .into_iter()
            .map(|v| v - base_value)
            .collect();

        let stride = (grid.len() / PROBE_GRID).max(1);
        let checked: Vec<usize> = (0..grid.len()).step_by(stride).collect();
        for &p in &probes {
            let probe = data.row(p);
            let mut rows = Matrix::from_shape_fn((checked.len() + 1, d), |(_, k)| probe[k]);
            rows[[0, j]] = baseline[j];
            for (r, &g) in checked.iter().enumerate() {
                rows[[r + 1, j]] = grid[g];
            }
            let out = predict(&rows)?;
            for (r, &g) in checked.iter().enumerate() {
                let gap = ((out[r + 1] - out[0]) - values[g]).abs();
                if !(gap <= ADDITIVITY_TOL) {
                    return Err(Error::NonAdditive { feature: j, gap });
                }
            }
        }
        shapes.push(ShapeFunction {
            feature: j,
            name: names[j].clone(),
            bins,
            values,
            importance: 0.0,
        });
    }
    let mut out = GamExplanation {
        intercept: base_value,
        shapes,
        interactions: Vec::new(),
    };
    center_terms(&mut out);
    out.update_importance();
    Ok(out)
}

fn tree_outputs_batched(model: &NodeGamModel, x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros((x.nrows(), model.config.total_outputs()));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let r = model.forward(&x.slice(ndarray::s![start..end, ..]).to_owned(), None)?;
        out.slice_mut(ndarray::s![start..end, ..])
            .assign(&r.tree_outputs);
        start = end;
    }
    Ok(out)
}

/// Tables of main and pairwise terms of an annealed model, before
/// purification. Each tree's output times its last-layer weights is
/// accumulated into the table of the feature set it depends on; the model's
/// constant offsets form the intercept.
///
/// `data` is in raw units; `pipeline` maps it to model inputs (identity when
/// `None`).
pub fn extract_ga2m_terms(
    model: &NodeGamModel,
    data: &Matrix,
    pipeline: Option<&Pipeline>,
    max_bins: usize,
    names: &[String],
) -> Result<GamExplanation> {
    let deps = model.dependency_report()?;
    let cfg = &model.config;
    if cfg.num_outputs != 1 {
        return invalid("explanations need a single-output model");
    }
    let (n, d) = data.dim();
    if d != cfg.num_features {
        return invalid("data width does not match the model");
    }
    if n == 0 {
        return invalid("no data to explain");
    }
    let names = default_names(d, names);
    let to_model = |raw: &Matrix| -> Result<Matrix> {
        match pipeline {
            Some(p) => p.gaussianize(raw),
            None => Ok(raw.clone()),
        }
    };
    let binnings: Vec<Binning> = (0..d)
        .map(|j| Binning::fit(&column(data, j), max_bins))
        .collect::<Result<_>>()?;

    let d_out = cfg.out_dim();
    let weights = model.last_linear.column(0);
    let mut by_term: BTreeMap<Term, Vec<usize>> = BTreeMap::new();
    for dep in &deps {
        let global = dep.layer * cfg.trees_per_layer + dep.tree;
        by_term.entry(dep.term()).or_default().push(global);
    }
    let contribution = |outputs: &Matrix, trees: &[usize]| -> Vec<f64> {
        outputs
            .rows()
            .into_iter()
            .map(|row| {
                trees
                    .iter()
                    .flat_map(|&t| (t * d_out..(t + 1) * d_out).map(|ch| row[ch] * weights[ch]))
                    .sum()
            })
            .collect()
    };
    let anchor: Vec<f64> = binnings.iter().map(|b| b.representatives[0]).collect();

    let mut shapes: Vec<ShapeFunction> = binnings
        .iter()
        .enumerate()
        .map(|(j, b)| ShapeFunction {
            feature: j,
            name: names[j].clone(),
            bins: b.clone(),
            values: vec![0.0; b.len()],
            importance: 0.0,
        })
        .collect();
    let mut interactions = Vec::new();
    for (term, trees) in &by_term {
        match *term {
            Term::Main(j) => {
                let reps = &binnings[j].representatives;
                let mut raw = Matrix::from_shape_fn((reps.len(), d), |(_, k)| anchor[k]);
                raw.column_mut(j)
                    .assign(&ndarray::Array1::from(reps.clone()));
                let outputs = tree_outputs_batched(model, &to_model(&raw)?)?;
                shapes[j].values = contribution(&outputs, trees);
            }
            Term::Pair(j, k) => {
                let (rj, rk) = (&binnings[j].representatives, &binnings[k].representatives);
                let mut raw = Matrix::from_shape_fn((rj.len() * rk.len(), d), |(_, c)| anchor[c]);
                for a in 0..rj.len() {
                    for b in 0..rk.len() {
                        raw[[a * rk.len() + b, j]] = rj[a];
                        raw[[a * rk.len() + b, k]] = rk[b];
                    }
                }
                let outputs = tree_outputs_batched(model, &to_model(&raw)?)?;
                let flat = contribution(&outputs, trees);
                let values = flat.chunks(rk.len()).map(<[f64]>::to_vec).collect();
                let mut counts = vec![vec![0.0; rk.len()]; rj.len()];
                for row in data.rows() {
                    counts[binnings[j].bin_of(row[j])][binnings[k].bin_of(row[k])] += 1.0;
                }
                interactions.push(InteractionSurface {
                    features: (j, k),
                    names: (names[j].clone(), names[k].clone()),
                    values,
                    counts,
                    importance: 0.0,
                });
            }
        }
    }
    let mut out = GamExplanation {
        intercept: model.bias[[0, 0]] + model.output_bias,
        shapes,
        interactions,
    };
    out.update_importance();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PurifyReport {
    pub sweeps: usize,
    pub converged: bool,
}

/// Moves row and column means of `surface` into the two main effects until
/// every mean is below 1e-10 (or 500 sweeps). With `weights`, means are
/// weighted by the per-cell counts; otherwise every cell counts once.
pub fn purify(
    surface: &mut [Vec<f64>],
    main_rows: &mut [f64],
    main_cols: &mut [f64],
    weights: Option<&[Vec<f64>]>,
) -> PurifyReport {
    let rows = surface.len();
    let cols = surface.first().map_or(0, Vec::len);
    let w = |a: usize, b: usize| weights.map_or(1.0, |w| w[a][b]);
    for sweep in 1..=PURIFY_MAX_SWEEPS {
        let mut largest: f64 = 0.0;
        for a in 0..rows {
            let total: f64 = (0..cols).map(|b| w(a, b)).sum();
            if total == 0.0 {
                continue;
            }
            let mean = (0..cols).map(|b| surface[a][b] * w(a, b)).sum::<f64>() / total;
            surface[a].iter_mut().for_each(|v| *v -= mean);
            main_rows[a] += mean;
            largest = largest.max(mean.abs());
        }
        for b in 0..cols {
            let total: f64 = (0..rows).map(|a| w(a, b)).sum();
            if total == 0.0 {
                continue;
            }
            let mean = (0..rows).map(|a| surface[a][b] * w(a, b)).sum::<f64>() / total;
            (0..rows).for_each(|a| surface[a][b] -= mean);
            main_cols[b] += mean;
            largest = largest.max(mean.abs());
        }
        if largest < PURIFY_TOL {
            return PurifyReport {
                sweeps: sweep,
                converged: true,
            };
        }
    }
    PurifyReport {
        sweeps: PURIFY_MAX_SWEEPS,
        converged: false,
    }
}

/// Shifts every main effect to zero data-weighted mean, moving the shift
/// into the intercept.
pub fn center_terms(exp: &mut GamExplanation) {
    for s in &mut exp.shapes {
        let total: f64 = s.bins.counts.iter().sum();
        if total == 0.0 {
            continue;
        }
        let mean = s
            .values
            .iter()
            .zip(&s.bins.counts)
            .map(|(v, c)| v * c)
            .sum::<f64>()
            / total;
        s.values.iter_mut().for_each(|v| *v -= mean);
        exp.intercept += mean;
    }
}

/// Purifies every interaction into its mains, then centers.
pub fn purify_explanation(exp: &mut GamExplanation, weighted: bool) -> Vec<PurifyReport> {
    let mut reports = Vec::with_capacity(exp.interactions.len());
    for p in &mut exp.interactions {
        let (j, k) = p.features;
        let mut mj = std::mem::take(&mut exp.shapes[j].values);
        let mut mk = std::mem::take(&mut exp.shapes[k].values);
        reports.push(purify(
            &mut p.values,
            &mut mj,
            &mut mk,
            weighted.then_some(p.counts.as_slice()),
        ));
        exp.shapes[j].values = mj;
        exp.shapes[k].values = mk;
    }
    center_terms(exp);
    exp.update_importance();
    reports
}

/// Full explanation of an annealed model: aggregate, purify, center.
pub fn explain(
    model: &NodeGamModel,
    data: &Matrix,
    pipeline: Option<&Pipeline>,
    max_bins: usize,
    names: &[String],
    weighted_purify: bool,
) -> Result<GamExplanation> {
    let mut exp = extract_ga2m_terms(model, data, pipeline, max_bins, names)?;
    purify_explanation(&mut exp, weighted_purify);
    Ok(exp)
}

/// Largest absolute gap between the explanation and the model on `data`.
pub fn reconstruction_gap(
    exp: &GamExplanation,
    model: &NodeGamModel,
    data: &Matrix,
    pipeline: Option<&Pipeline>,
) -> Result<f64> {
    let x = match pipeline {
        Some(p) => p.gaussianize(data)?,
        None => data.clone(),
    };
    let pred = crate::training::predict_batched(model, &x)?;
    let recon = exp.predict(data)?;
    Ok(recon
        .iter()
        .zip(pred.column(0))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Replaces every value by its bin representative. On snapped rows the
/// explanation is exact up to rounding, so the gap there isolates
/// aggregation errors from binning loss.
pub fn snap_to_bins(exp: &GamExplanation, data: &Matrix) -> Result<Matrix> {
    if data.ncols() != exp.shapes.len() {
        return invalid("row width does not match the explanation");
    }
    Ok(Matrix::from_shape_fn(data.dim(), |(i, j)| {
        let bins = &exp.shapes[j].bins;
        bins.representatives[bins.bin_of(data[[i, j]])]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn purify_hand_example() {
        let mut s = vec![vec![2.0, 0.0], vec![0.0, 0.0]];
        let (mut mj, mut mk) = (vec![0.0; 2], vec![0.0; 2]);
        let r = purify(&mut s, &mut mj, &mut mk, None);
        assert!(r.converged);
        assert_eq!(mj, vec![1.0, 0.0]);
        assert_eq!(mk, vec![0.5, -0.5]);
        assert_eq!(s, vec![vec![0.5, -0.5], vec![-0.5, 0.5]]);
    }

    #[test]
    fn purify_constant_and_pure() {
        let mut s = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let (mut mj, mut mk) = (vec![0.0; 2], vec![0.0; 2]);
        purify(&mut s, &mut mj, &mut mk, None);
        assert_eq!(s, vec![vec![0.0; 2]; 2]);
        assert_eq!(mj, vec![1.0, 1.0]);

        let pure = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let mut s = pure.clone();
        let (mut mj, mut mk) = (vec![0.0; 2], vec![0.0; 2]);
        purify(&mut s, &mut mj, &mut mk, None);
        assert_eq!(s, pure);
        assert_eq!(mj, vec![0.0; 2]);
        assert_eq!(mk, vec![0.0; 2]);
    }

    #[test]
    fn binning_unique_and_quantile() {
        let b = Binning::fit(&[3.0, 1.0, 1.0, 2.0], 10).unwrap();
        assert_eq!(b.edges, vec![1.0, 2.0, 3.0]);
        assert_eq!(b.counts, vec![2.0, 1.0, 1.0]);
        assert_eq!(b.bin_of(1.5), 1);
        assert_eq!(b.bin_of(-4.0), 0);
        assert_eq!(b.bin_of(9.0), 2);

        let vals: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let b = Binning::fit(&vals, 4).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.counts, vec![250.0; 4]);
        assert_eq!(b.representatives[0], 124.5);
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(b.bin_of(*v), i / 250);
        }
    }

    #[test]
    fn centering_moves_mean_to_intercept() {
        let bins = Binning::fit(&[0.0, 1.0, 1.0, 1.0], 10).unwrap();
        let mut exp = GamExplanation {
            intercept: 1.0,
            shapes: vec![ShapeFunction {
                feature: 0,
                name: "a".into(),
                bins,
                values: vec![4.0, 4.0],
                importance: 0.0,
            }],
            interactions: Vec::new(),
        };
        center_terms(&mut exp);
        assert_eq!(exp.shapes[0].values, vec![0.0, 0.0]);
        assert_eq!(exp.intercept, 5.0);
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance(&[0.0, 0.0], &[3.0, 4.0]), 0.0);
        assert_eq!(importance(&[1.0, -1.0], &[5.0, 5.0]), 1.0);
    }

    #[test]
    fn gam_shapes_of_closed_form_models() {
        let data = Matrix::from_shape_fn((9, 2), |(i, j)| {
            if j == 0 {
                i as f64 - 4.0
            } else {
                (i % 3) as f64
            }
        });
        let linear = |x: &Matrix| -> Result<Vec<f64>> {
            Ok(x.rows().into_iter().map(|r| 3.0 * r[0] + 5.0).collect())
        };
        let exp = extract_gam_shapes(&linear, &data, &[1.0, 2.0], &[], 1).unwrap();
        assert_abs_diff_eq!(exp.intercept, 5.0, epsilon = 1e-12);
        for (g, v) in exp.shapes[0]
            .bins
            .representatives
            .iter()
            .zip(&exp.shapes[0].values)
        {
            assert_abs_diff_eq!(*v, 3.0 * g, epsilon = 1e-12);
        }
        assert!(exp.shapes[1].values.iter().all(|v| v.abs() < 1e-12));

        let step = |x: &Matrix| -> Result<Vec<f64>> {
            Ok(x.rows()
                .into_iter()
                .map(|r| if r[0] > 0.0 { 2.0 } else { 0.0 })
                .collect())
        };
        let exp = extract_gam_shapes(&step, &data, &[0.0, 0.0], &[], 1).unwrap();
        let v = &exp.shapes[0].values;
        assert_abs_diff_eq!(v[8] - v[0], 2.0, epsilon = 1e-12);
        // 4 of 9 rows are positive.
        assert_abs_diff_eq!(v[8], 2.0 * 5.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(exp.intercept, 8.0 / 9.0, epsilon = 1e-12);

        let constant = |x: &Matrix| -> Result<Vec<f64>> { Ok(vec![7.0; x.nrows()]) };
        let exp = extract_gam_shapes(&constant, &data, &[0.0, 0.0], &[], 1).unwrap();
        assert_eq!(exp.intercept, 7.0);
        assert!(exp
            .shapes
            .iter()
            .all(|s| s.values.iter().all(|v| *v == 0.0)));

        let product = |x: &Matrix| -> Result<Vec<f64>> {
            Ok(x.rows().into_iter().map(|r| r[0] * r[1]).collect())
        };
        assert!(matches!(
            extract_gam_shapes(&product, &data, &[0.0, 0.0], &[], 1),
            Err(Error::NonAdditive { .. })
        ));
    }
}
