mod common;

use nodegam::error::Error;
use nodegam::numeric::Matrix;
use nodegam::preprocess::{Frame, Pipeline, PreprocessConfig, QuantileColumn, Schema, Table};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn uniform_column(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

fn fit(values: &[f64]) -> QuantileColumn {
    QuantileColumn::fit(values, 2000, 1e-5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn uniform_input_becomes_standard_normal() {
    let vals = uniform_column(100_000, 1);
    let q = fit(&vals);
    let z: Vec<f64> = vals.iter().map(|v| q.transform(*v)).collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((std - 1.0).abs() < 0.05, "std {std}");
}

#[test]
fn ks_distance_to_gaussian() {
    // Skewed input: the transform must undo the shape, not just rescale.
    let vals: Vec<f64> = uniform_column(20_000, 2)
        .iter()
        .map(|u| (-u.ln()).powf(1.5))
        .collect();
    let q = fit(&vals);
    let mut z: Vec<f64> = vals.iter().map(|v| q.transform(*v)).collect();
    z.sort_by(f64::total_cmp);
    let phi = Normal::new(0.0, 1.0).unwrap();
    let n = z.len() as f64;
    let ks = z
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = phi.cdf(*v);
            (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS distance {ks}");
}

#[test]
fn median_maps_to_zero() {
    let vals = uniform_column(5001, 3);
    let mut sorted = vals.clone();
    sorted.sort_by(f64::total_cmp);
    assert!(fit(&vals).transform(sorted[2500]).abs() < 0.05);
}

proptest! {
    #[test]
    fn transform_is_monotone(a in -2.0f64..3.0, b in -2.0f64..3.0) {
        let q = fit(&uniform_column(3000, 4));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(q.transform(lo) <= q.transform(hi));
    }
}

const CSV: &str =
    "a,b,city,y\n1.0,10,x,1\n2.0,,y,0\n3.0,30,x,1\n4.0,40,z,0\n5.0,50,y,1\n6.0,60,x,0\n";
const SCHEMA: &str = "a = numeric\nb = numeric\ncity = categorical\ny = target\n";

fn fitted() -> (Pipeline, Frame) {
    let table = Table::from_reader(CSV.as_bytes()).unwrap();
    let schema = Schema::parse(SCHEMA).unwrap();
    table.check_schema(&schema).unwrap();
    let frame = Frame::from_table(&table, &schema.features(), schema.target()).unwrap();
    let p = Pipeline::fit(&frame, schema.target(), PreprocessConfig::default()).unwrap();
    (p, frame)
}

#[test]
fn missing_numeric_is_mean_imputed() {
    let (p, frame) = fitted();
    let encoded = p.encode(&frame).unwrap();
    assert_eq!(encoded[[1, 1]], 38.0);
    let z = p.transform(&frame).unwrap();
    let at_mean = p.quantiles[1].transform(38.0);
    assert_eq!(z[[1, 1]], at_mean);
}

#[test]
fn categoricals_are_target_encoded() {
    let (p, frame) = fitted();
    let enc = p.encoders[2].as_ref().unwrap();
    // x: y = 1, 1, 0 with m = 10 and global mean 0.5.
    assert_eq!(enc.encode("x"), (2.0 + 5.0) / 13.0);
    assert_eq!(enc.encode("unseen"), 0.5);
    assert_eq!(p.encode(&frame).unwrap()[[0, 2]], (2.0 + 5.0) / 13.0);
}

#[test]
fn pipeline_round_trips_bit_exact() {
    let (p, frame) = fitted();
    let json = serde_json::to_string(&p).unwrap();
    let back: Pipeline = serde_json::from_str(&json).unwrap();
    assert_eq!(back, p);
    let (a, b) = (
        p.transform(&frame).unwrap(),
        back.transform(&frame).unwrap(),
    );
    assert!(a
        .iter()
        .zip(b.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn fitting_is_deterministic() {
    let (a, frame) = fitted();
    let (b, _) = fitted();
    assert_eq!(a.transform(&frame).unwrap(), b.transform(&frame).unwrap());
}

#[test]
fn mean_row_maps_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = common::gaussian_matrix(&mut rng, 4000, 3).mapv(|v| 2.0 * v + 1.0);
    let names: Vec<String> = (0..3).map(|j| format!("f{j}")).collect();
    let frame = Frame::from_matrix(&x, &names, None);
    let p = Pipeline::fit(&frame, None, PreprocessConfig::default()).unwrap();
    let means = Matrix::from_shape_fn((1, 3), |(_, j)| x.column(j).mean().unwrap());
    let z = p.gaussianize(&means).unwrap();
    assert!(z.iter().all(|v| v.abs() < 0.1), "{z:?}");
}

#[test]
fn schema_errors() {
    let table = Table::from_reader(CSV.as_bytes()).unwrap();
    let partial = Schema::parse("a = numeric\ny = target\n").unwrap();
    assert!(matches!(
        table.check_schema(&partial),
        Err(Error::Schema(_))
    ));
    let (p, _) = fitted();
    let other = Table::from_reader("a,c\n1,2\n".as_bytes()).unwrap();
    assert!(matches!(p.frame(&other, false), Err(Error::Schema(_))));
    let bad = Table::from_reader("a,b,city,y\n1,zz,x,1\n".as_bytes()).unwrap();
    assert!(matches!(p.frame(&bad, true), Err(Error::Schema(_))));
    let nan_target = Table::from_reader("a,b,city,y\n1,2,x,\n".as_bytes()).unwrap();
    assert!(matches!(p.frame(&nan_target, true), Err(Error::Schema(_))));
}
