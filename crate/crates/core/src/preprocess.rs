//! Tabular preprocessing: schema, CSV ingestion, target encoding of
//! categoricals, mean imputation and a per-feature quantile transform to a
//! standard Gaussian.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as Gaussian};

use crate::error::{invalid, Error, Result};
use crate::numeric::Matrix;

/// Transformed values are clipped to this many standard deviations.
pub const GAUSSIAN_CLIP: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
    Ignore,
}

impl std::str::FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "numeric" => Ok(ColumnKind::Numeric),
            "categorical" => Ok(ColumnKind::Categorical),
            "target" => Ok(ColumnKind::Target),
            "ignore" => Ok(ColumnKind::Ignore),
            other => Err(Error::Schema(format!("unknown column kind `{other}`"))),
        }
    }
}

/// Column name → kind, in file order.
///
/// The text format is one `name = kind` pair per line; blank lines and lines
/// starting with `#` are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Schema> {
        let mut columns: Vec<(String, ColumnKind)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((name, kind)) = line.split_once('=') else {
                return Err(Error::Schema(format!(
                    "line {}: expected `name = kind`",
                    lineno + 1
                )));
            };
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(Error::Schema(format!(
                    "line {}: empty column name",
                    lineno + 1
                )));
            }
            if columns.iter().any(|(n, _)| *n == name) {
                return Err(Error::Schema(format!("column `{name}` listed twice")));
            }
            columns.push((name, kind.parse()?));
        }
        let targets = columns
            .iter()
            .filter(|(_, k)| *k == ColumnKind::Target)
            .count();
        if targets > 1 {
            return Err(Error::Schema("more than one target column".into()));
        }
        if !columns
            .iter()
            .any(|(_, k)| matches!(k, ColumnKind::Numeric | ColumnKind::Categorical))
        {
            return Err(Error::Schema("schema has no feature columns".into()));
        }
        Ok(Schema { columns })
    }

    pub fn load(path: &Path) -> Result<Schema> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn features(&self) -> Vec<FeatureSpec> {
        self.columns
            .iter()
            .filter(|(_, k)| matches!(k, ColumnKind::Numeric | ColumnKind::Categorical))
            .map(|(name, kind)| FeatureSpec {
                name: name.clone(),
                categorical: *kind == ColumnKind::Categorical,
            })
            .collect()
    }

    pub fn target(&self) -> Option<&str> {
        self.columns
            .iter()
            .find(|(_, k)| *k == ColumnKind::Target)
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub categorical: bool,
}

/// A CSV file as strings.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Table { headers, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Checks that every column of the file is described by the schema.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        for h in &self.headers {
            if !schema.columns.iter().any(|(n, _)| n == h) {
                return Err(Error::Schema(format!("column `{h}` is not in the schema")));
            }
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "NaN" | "nan" | "?" | "null")
}

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl Column {
    fn select(&self, idx: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(idx.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => {
                Column::Categorical(idx.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }
}

/// Typed feature columns plus optional targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub features: Vec<FeatureSpec>,
    pub columns: Vec<Column>,
    pub target: Option<Vec<f64>>,
    rows: usize,
}

impl Frame {
    /// Extracts `features` (and the target column if named) from a table.
    pub fn from_table(
        table: &Table,
        features: &[FeatureSpec],
        target: Option<&str>,
    ) -> Result<Frame> {
        let mut columns = Vec::with_capacity(features.len());
        for f in features {
            let c = table
                .column(&f.name)
                .ok_or_else(|| Error::Schema(format!("missing column `{}`", f.name)))?;
            columns.push(if f.categorical {
                Column::Categorical(
                    table
                        .rows
                        .iter()
                        .map(|r| (!is_missing(&r[c])).then(|| r[c].trim().to_string()))
                        .collect(),
                )
            } else {
                let mut vals = Vec::with_capacity(table.rows.len());
                for (i, r) in table.rows.iter().enumerate() {
                    let cell = &r[c];
                    vals.push(if is_missing(cell) {
                        None
                    } else {
                        let v: f64 = cell.trim().parse().map_err(|_| {
                            Error::Schema(format!(
                                "row {}: `{}` is not numeric in column `{}`",
                                i + 1,
                                cell,
                                f.name
                            ))
                        })?;
                        v.is_finite().then_some(v)
                    });
                }
                Column::Numeric(vals)
            });
        }
        let target = match target {
            None => None,
            Some(name) => {
                let c = table
                    .column(name)
                    .ok_or_else(|| Error::Schema(format!("missing target column `{name}`")))?;
                let mut ys = Vec::with_capacity(table.rows.len());
                for (i, r) in table.rows.iter().enumerate() {
                    let y: f64 = r[c]
                        .trim()
                        .parse()
                        .ok()
                        .filter(|v: &f64| v.is_finite())
                        .ok_or_else(|| {
                            Error::Schema(format!(
                                "row {}: target `{}` is not a finite number",
                                i + 1,
                                r[c]
                            ))
                        })?;
                    ys.push(y);
                }
                Some(ys)
            }
        };
        Ok(Frame {
            features: features.to_vec(),
            columns,
            target,
            rows: table.rows.len(),
        })
    }

    /// All-numeric frame from a dense matrix.
    pub fn from_matrix(x: &Matrix, names: &[String], target: Option<Vec<f64>>) -> Frame {
        Frame {
            features: names
                .iter()
                .map(|n| FeatureSpec {
                    name: n.clone(),
                    categorical: false,
                })
                .collect(),
            columns: x
                .columns()
                .into_iter()
                .map(|c| Column::Numeric(c.iter().map(|v| Some(*v)).collect()))
                .collect(),
            target,
            rows: x.nrows(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn select(&self, idx: &[usize]) -> Frame {
        Frame {
            features: self.features.clone(),
            columns: self.columns.iter().map(|c| c.select(idx)).collect(),
            target: self
                .target
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
            rows: idx.len(),
        }
    }
}

/// Smoothed per-category target mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEncoder {
    pub values: BTreeMap<String, f64>,
    pub fallback: f64,
}

impl TargetEncoder {
    pub fn fit(
        categories: &[Option<String>],
        targets: &[f64],
        smoothing: f64,
    ) -> Result<TargetEncoder> {
        if categories.is_empty() {
            return invalid("cannot target-encode an empty column");
        }
        if categories.len() != targets.len() {
            return invalid("categories and targets differ in length");
        }
        let global = targets.iter().sum::<f64>() / targets.len() as f64;
        let mut acc: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for (c, y) in categories.iter().zip(targets) {
            if let Some(c) = c {
                let e = acc.entry(c.clone()).or_insert((0.0, 0.0));
                e.0 += y;
                e.1 += 1.0;
            }
        }
        let values = acc
            .into_iter()
            .map(|(c, (sum, count))| (c, (sum + smoothing * global) / (count + smoothing)))
            .collect();
        Ok(TargetEncoder {
            values,
            fallback: global,
        })
    }

    /// Label-free fallback: categories map to their rank in sorted order.
    pub fn fit_ordinal(categories: &[Option<String>]) -> TargetEncoder {
        let mut uniq: Vec<&String> = categories.iter().flatten().collect();
        uniq.sort();
        uniq.dedup();
        let values: BTreeMap<String, f64> = uniq
            .iter()
            .enumerate()
            .map(|(i, c)| ((*c).clone(), i as f64))
            .collect();
        let fallback = if values.is_empty() {
            0.0
        } else {
            (values.len() - 1) as f64 / 2.0
        };
        TargetEncoder { values, fallback }
    }

    pub fn encode(&self, category: &str) -> f64 {
        self.values.get(category).copied().unwrap_or(self.fallback)
    }
}

/// Reference quantiles of one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileColumn {
    /// Values at equally spaced probabilities `0, 1/(n-1), ..., 1`.
    pub references: Vec<f64>,
}

impl QuantileColumn {
    pub fn fit(
        values: &[f64],
        n_quantiles: usize,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<QuantileColumn> {
        if values.len() < 2 {
            return invalid("quantile transform needs at least two values");
        }
        if n_quantiles < 2 {
            return invalid("n_quantiles must be at least 2");
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = noise * if std > 0.0 { std } else { 1.0 };
        let mut noisy: Vec<f64> = if scale > 0.0 {
            let dist = Normal::new(0.0, scale).unwrap();
            values.iter().map(|v| v + dist.sample(rng)).collect()
        } else {
            values.to_vec()
        };
        noisy.sort_by(f64::total_cmp);
        let nq = n_quantiles.min(values.len());
        let references = (0..nq)
            .map(|i| crate::layer::quantile_sorted(&noisy, i as f64 / (nq - 1) as f64))
            .collect();
        Ok(QuantileColumn { references })
    }

    /// Empirical CDF position of `x` by interpolation between references;
    /// runs of equal references map to the middle of their probability span.
    pub fn probability(&self, x: f64) -> f64 {
        let r = &self.references;
        let last = (r.len() - 1) as f64;
        let below = r.partition_point(|v| *v < x);
        let upto = r.partition_point(|v| *v <= x);
        if below < upto {
            return (below + upto - 1) as f64 / 2.0 / last;
        }
        if below == 0 {
            return 0.0;
        }
        if below == r.len() {
            return 1.0;
        }
        let (lo, hi) = (r[below - 1], r[below]);
        ((below - 1) as f64 + (x - lo) / (hi - lo)) / last
    }

    pub fn transform(&self, x: f64) -> f64 {
        let p = self.probability(x);
        let z = Gaussian::new(0.0, 1.0).unwrap().inverse_cdf(p);
        z.clamp(-GAUSSIAN_CLIP, GAUSSIAN_CLIP)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub n_quantiles: usize,
    /// Fit-time noise, relative to each column's standard deviation.
    pub noise: f64,
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            n_quantiles: 2000,
            noise: 1e-5,
            smoothing: 10.0,
            seed: 0,
        }
    }
}

/// Fitted preprocessing: encode categoricals, impute, quantile-transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub features: Vec<FeatureSpec>,
    pub target: Option<String>,
    pub config: PreprocessConfig,
    pub encoders: Vec<Option<TargetEncoder>>,
    pub means: Vec<f64>,
    pub quantiles: Vec<QuantileColumn>,
}

impl Pipeline {
    pub fn fit(frame: &Frame, target: Option<&str>, config: PreprocessConfig) -> Result<Pipeline> {
        if frame.len() < 2 {
            return invalid("need at least two rows to fit preprocessing");
        }
        let mut encoders = Vec::with_capacity(frame.columns.len());
        for col in &frame.columns {
            encoders.push(match col {
                Column::Numeric(_) => None,
                Column::Categorical(cats) => Some(match &frame.target {
                    Some(y) => TargetEncoder::fit(cats, y, config.smoothing)?,
                    None => TargetEncoder::fit_ordinal(cats),
                }),
            });
        }
        let mut pipeline = Pipeline {
            features: frame.features.clone(),
            target: target.map(str::to_string),
            config,
            encoders,
            means: Vec::new(),
            quantiles: Vec::new(),
        };
        let encoded = pipeline.encode_columns(frame)?;
        for (j, col) in encoded.iter().enumerate() {
            let present: Vec<f64> = col.iter().flatten().copied().collect();
            let mean = if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            };
            pipeline.means.push(mean);
            let filled: Vec<f64> = col.iter().map(|v| v.unwrap_or(mean)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(pipeline.config.seed.wrapping_add(j as u64));
            pipeline.quantiles.push(QuantileColumn::fit(
                &filled,
                pipeline.config.n_quantiles,
                pipeline.config.noise,
                &mut rng,
            )?);
        }
        Ok(pipeline)
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    fn encode_columns(&self, frame: &Frame) -> Result<Vec<Vec<Option<f64>>>> {
        if frame.features.len() != self.features.len() {
            return Err(Error::Schema(
                "frame columns do not match the pipeline".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.features.len());
        for ((spec, col), enc) in self.features.iter().zip(&frame.columns).zip(&self.encoders) {
            out.push(match (col, enc) {
                (Column::Numeric(v), None) => v.clone(),
                (Column::Categorical(v), Some(enc)) => v
                    .iter()
                    .map(|c| c.as_deref().map(|c| enc.encode(c)))
                    .collect(),
                _ => {
                    return Err(Error::Schema(format!(
                        "column `{}` changed type",
                        spec.name
                    )))
                }
            });
        }
        Ok(out)
    }

    /// Frame from a table using the pipeline's own feature list.
    pub fn frame(&self, table: &Table, with_target: bool) -> Result<Frame> {
        let target = if with_target {
            Some(
                self.target
                    .as_deref()
                    .ok_or_else(|| Error::Schema("pipeline has no target column".into()))?,
            )
        } else {
            None
        };
        Frame::from_table(table, &self.features, target)
    }

    /// Encoded, imputed values in raw units (before the quantile map).
    pub fn encode(&self, frame: &Frame) -> Result<Matrix> {
        let cols = self.encode_columns(frame)?;
        Ok(Matrix::from_shape_fn(
            (frame.len(), cols.len()),
            |(i, j)| cols[j][i].unwrap_or(self.means[j]),
        ))
    }

    /// Quantile-maps encoded values to standard-Gaussian scores.
    pub fn gaussianize(&self, encoded: &Matrix) -> Result<Matrix> {
        if encoded.ncols() != self.quantiles.len() {
            return invalid("column count does not match the pipeline");
        }
        Ok(Matrix::from_shape_fn(encoded.dim(), |(i, j)| {
            self.quantiles[j].transform(encoded[[i, j]])
        }))
    }

    pub fn transform(&self, frame: &Frame) -> Result<Matrix> {
        self.gaussianize(&self.encode(frame)?)
    }
}

/// Deterministic train/validation split. Binary targets are split per class
/// so both parts keep the class balance.
pub fn train_val_split(
    targets: Option<&[f64]>,
    n: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return invalid("val_fraction must lie in (0, 1)");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let binary = targets.is_some_and(|y| y.iter().all(|v| *v == 0.0 || *v == 1.0));
    let groups: Vec<Vec<usize>> = match targets {
        Some(y) if binary => vec![
            (0..n).filter(|&i| y[i] == 0.0).collect(),
            (0..n).filter(|&i| y[i] == 1.0).collect(),
        ],
        _ => vec![(0..n).collect()],
    };
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(&mut rng);
        let k = (g.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&g[..k]);
        train.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    if train.is_empty() || val.is_empty() {
        return invalid("split left an empty train or validation part");
    }
    Ok((train, val))
}
