use std::path::Path;

use bsefuse::dataio::image::resize_plane;
use bsefuse::metrics::welch_ttest;
use ndarray::Array2;
use serde::Deserialize;

fn fixture<T: for<'de> Deserialize<'de>>(name: &str) -> T {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[derive(Deserialize)]
struct Bilinear {
    in_h: usize,
    in_w: usize,
    side: usize,
    step: usize,
    samples: Vec<Vec<f32>>,
    sum: f64,
}

#[test]
fn bilinear_resize_matches_reference() {
    let f: Bilinear = fixture("bilinear_37x61_to_224.json");
    let img = Array2::from_shape_fn((f.in_h, f.in_w), |(y, x)| ((y * 7 + x * 13) % 17) as f32 / 16.0);
    let out = resize_plane(img.view(), f.side, f.side);
    for (i, row) in f.samples.iter().enumerate() {
        for (j, &want) in row.iter().enumerate() {
            let got = out[[i * f.step, j * f.step]];
            assert!((got - want).abs() < 1e-5, "({i},{j}): {got} vs {want}");
        }
    }
    let sum: f64 = out.iter().map(|&v| v as f64).sum();
    assert!((sum - f.sum).abs() < 1e-2, "{sum} vs {}", f.sum);
}

#[derive(Deserialize)]
struct WelchCase {
    a: Vec<f64>,
    b: Vec<f64>,
    t: f64,
    df: f64,
    p: f64,
}

#[derive(Deserialize)]
struct Welch {
    cases: Vec<WelchCase>,
}

#[test]
fn welch_matches_reference_on_100_pairs() {
    let f: Welch = fixture("welch_scipy.json");
    assert_eq!(f.cases.len(), 100);
    for (i, c) in f.cases.iter().enumerate() {
        let r = welch_ttest(&c.a, &c.b).unwrap();
        assert!((r.t - c.t).abs() <= 1e-9 * c.t.abs().max(1.0), "case {i}: t {} vs {}", r.t, c.t);
        assert!((r.df - c.df).abs() <= 1e-9 * c.df.max(1.0), "case {i}: df {} vs {}", r.df, c.df);
        assert!(
            (r.p - c.p).abs() <= 1e-6 * c.p + 1e-12,
            "case {i}: p {} vs {}",
            r.p,
            c.p
        );
    }
}
