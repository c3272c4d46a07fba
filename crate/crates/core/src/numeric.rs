//! Sparse activations and small differentiable building blocks.
//!
//! `entmax15` is the α = 1.5 member of the entmax family, solved exactly by
//! sorting and thresholding. `entmoid15` is its two-class scalar reduction.
//! Every op here has a hand-derived gradient; the finite-difference checks in
//! the test suite are the reference for all of them.

use ndarray::Array2;
use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Dense row-major matrix of 64-bit floats.
pub type Matrix = Array2<f64>;

/// 1.5-entmax of `z / temperature`.
///
/// Entries equal to `-inf` are treated as excluded and always receive 0;
/// this is how column subsampling masks features. NaN or `+inf` are
/// rejected. At `temperature == 0` the result is the exact one-hot of the
/// argmax, with ties going to the lowest index.
pub fn entmax15_masked(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; z.len()];
    entmax15_into(z, temperature, &mut out)?;
    Ok(out)
}

/// 1.5-entmax over finite logits.
pub fn entmax15(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return invalid("entmax15 input must be finite");
    }
    entmax15_masked(z, temperature)
}

pub(crate) fn entmax15_into(z: &[f64], temperature: f64, out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(z.len(), out.len());
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return invalid(format!(
            "temperature must be finite and >= 0, got {temperature}"
        ));
    }
    if z.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return invalid("entmax15 input contains NaN or +inf");
    }
    let Some(top) = argmax(z) else {
        return Err(Error::InvalidState(
            "every logit is -inf; no feature can be selected".into(),
        ));
    };
    out.iter_mut().for_each(|v| *v = 0.0);
    if temperature == 0.0 {
        out[top] = 1.0;
        return Ok(());
    }

    let max = z[top];
    let scale = 0.5 / temperature;
    let mut sorted: Vec<f64> = z
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - max) * scale)
        .collect();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());

    // Running mean and sum of squared deviations (Welford) over the top-k
    // sorted values give the threshold candidate for support size k.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut tau_star = f64::NAN;
    for (k0, &y) in sorted.iter().enumerate() {
        let k = (k0 + 1) as f64;
        let delta_mean = y - mean;
        mean += delta_mean / k;
        m2 += delta_mean * (y - mean);
        let delta = ((1.0 - m2) / k).max(0.0);
        let tau = mean - delta.sqrt();
        if tau <= y {
            tau_star = tau;
        } else {
            break;
        }
    }

    for (o, &v) in out.iter_mut().zip(z) {
        if v.is_finite() {
            let d = (v - max) * scale - tau_star;
            if d > 0.0 {
                *o = d * d;
            }
        }
    }
    // The closed form sums to 1 up to rounding; renormalize so ties come out
    // exact (e.g. two equal logits give exactly 0.5 each).
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// Vector-Jacobian product of `entmax15` at temperature 1.
///
/// On the support the Jacobian is `diag(s) - s sᵀ / Σs` with `s = √p`.
/// Divide the result by the temperature for `entmax15(z / T)`.
pub fn entmax15_vjp(probs: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != upstream.len() {
        return invalid(format!(
            "entmax15_vjp length mismatch: {} vs {}",
            probs.len(),
            upstream.len()
        ));
    }
    let mut out = vec![0.0; probs.len()];
    entmax15_vjp_into(probs, upstream, 1.0, &mut out);
    Ok(out)
}

/// Writes `Jᵀ·upstream / temperature` into `out`.
pub(crate) fn entmax15_vjp_into(
    probs: &[f64],
    upstream: &[f64],
    temperature: f64,
    out: &mut [f64],
) {
    let mut sum_s = 0.0;
    let mut sum_ds = 0.0;
    for (&p, &u) in probs.iter().zip(upstream) {
        if p > 0.0 {
            let s = p.sqrt();
            sum_s += s;
            sum_ds += u * s;
        }
    }
    let q = if sum_s > 0.0 { sum_ds / sum_s } else { 0.0 };
    for ((o, &p), &u) in out.iter_mut().zip(probs).zip(upstream) {
        *o = if p > 0.0 {
            let s = p.sqrt();
            (u - q) * s / temperature
        } else {
            0.0
        };
    }
}

/// Index of the largest finite entry; ties resolve to the lowest index.
pub fn argmax(z: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in z.iter().enumerate() {
        if v == f64::NEG_INFINITY || v.is_nan() {
            continue;
        }
        match best {
            Some(b) if z[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

// (x + sqrt(8 - x²)) / 4 is the larger square-root of the two-class solution.
fn entmoid_upper(x: f64) -> f64 {
    let u = (x + (8.0 - x * x).sqrt()) * 0.25;
    u * u
}

/// Sparse sigmoid: the first component of `entmax15([x, 0])`.
///
/// Exactly 0 for `x <= -2` and exactly 1 for `x >= 2`. The negative half is
/// computed as `1 - entmoid15(-x)` so that `entmoid15(x) + entmoid15(-x)`
/// is exactly 1.
#[inline]
pub fn entmoid15(x: f64) -> f64 {
    if x >= 2.0 {
        1.0
    } else if x <= -2.0 {
        0.0
    } else if x > 0.0 {
        entmoid_upper(x)
    } else if x < 0.0 {
        1.0 - entmoid_upper(-x)
    } else {
        0.5
    }
}

/// Derivative of [`entmoid15`]; zero outside `(-2, 2)`.
#[inline]
pub fn entmoid15_grad(x: f64) -> f64 {
    let a = x.abs();
    if a >= 2.0 {
        return 0.0;
    }
    let r = (8.0 - a * a).sqrt();
    (a + r) * (1.0 - a / r) * 0.125
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted-dropout scale factors: each entry is 0 with probability `rate`
/// and `1 / (1 - rate)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Matrix> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok(Array2::from_shape_simple_fn((rows, cols), || {
        if rate > 0.0 && rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

/// Dropout with rate `rate`; identity when `training` is false.
pub fn dropout<R: Rng + ?Sized>(
    m: &Matrix,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Matrix> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(m.clone());
    }
    let mask = dropout_mask(m.nrows(), m.ncols(), rate, rng)?;
    Ok(m * &mask)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return invalid(format!("dropout rate must lie in [0, 1), got {rate}"));
    }
    Ok(())
}

pub(crate) fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}
