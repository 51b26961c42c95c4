//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use gaitgraph::data::SkeletonSequence;

pub const FD_STEP: f64 = 1e-5;

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_difference(x: &[f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + FD_STEP;
    let up = f(&probe);
    probe[i] = x[i] - FD_STEP;
    let down = f(&probe);
    (up - down) / (2.0 * FD_STEP)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Pearson correlation of the displacement of joint `j` at `t` with the
/// displacement of joint `i` at `t - lag`, pooled over the x and y channels.
pub fn lag_displacement_correlation(seq: &SkeletonSequence, i: usize, j: usize, lag: usize) -> f64 {
    let (t, _, _) = seq.shape();
    let (mut a, mut b) = (vec![], vec![]);
    for ch in 0..2 {
        for f in lag + 1..t {
            a.push(seq.at(f, j, ch) - seq.at(f - 1, j, ch));
            b.push(seq.at(f - lag, i, ch) - seq.at(f - lag - 1, i, ch));
        }
    }
    pearson(&a, &b)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Direct dense `D^{-1/2} (A + I) D^{-1/2}` written from the definition.
pub fn dense_normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let v = a.len();
    let with_loops: Vec<Vec<f64>> = (0..v)
        .map(|i| (0..v).map(|j| a[i][j] + if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let d: Vec<f64> = with_loops.iter().map(|r| r.iter().sum()).collect();
    (0..v)
        .map(|i| (0..v).map(|j| with_loops[i][j] / (d[i] * d[j]).sqrt()).collect())
        .collect()
}

/// Minimal reader for the DOT files written by the exporter: returns
/// `(node_a, node_b, weight)` triples.
pub fn parse_dot_edges(text: &str) -> Vec<(String, String, f64)> {
    let mut edges = vec![];
    for line in text.lines() {
        let line = line.trim();
        let Some((lhs, rest)) = line.split_once(" -- ") else { continue };
        let a = lhs.trim_matches('"').to_string();
        let (b, attrs) = rest.split_once(' ').expect("edge attributes");
        let b = b.trim_matches('"').to_string();
        let w = attrs
            .trim_start_matches("[weight=")
            .trim_end_matches("];")
            .parse()
            .expect("weight");
        edges.push((a, b, w));
    }
    edges
}

pub mod checks;
