//! Wall-clock comparison of a plain 1x1 convolution, element-wise routing
//! and Gram-matrix routing.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::routing::{combine, gram, route_conv1x1_kernel, route_conv1x1_naive, Conv1x1CapsuleParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// `g_j = sum_i W[i][j] f_i`, no routing.
    Plain,
    /// Routing iterations over the full feature maps.
    Naive,
    /// Gram matrix once, iterations on I x J matrices, output maps once.
    Kernel,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Plain, BenchMode::Naive, BenchMode::Kernel];
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Plain => "plain",
            BenchMode::Naive => "naive",
            BenchMode::Kernel => "kernel",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchCase {
    pub spatial: usize,
    pub in_maps: usize,
    pub out_maps: usize,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub case: BenchCase,
    pub median_ns: u64,
}

/// Random `I x S` features and `I x J` weights for `case`.
pub fn bench_inputs(case: &BenchCase, seed: u64) -> Result<(Matrix, Conv1x1CapsuleParams)> {
    if case.spatial == 0 || case.in_maps == 0 || case.out_maps == 0 || case.iters == 0 {
        return Err(invalid("benchmark sizes must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::randn(&[case.in_maps, case.spatial], 1.0, &mut rng);
    let w = Tensor::randn(
        &[case.in_maps, case.out_maps],
        1.0 / (case.in_maps as f64).sqrt(),
        &mut rng,
    );
    Ok((
        Matrix::from_vec(case.in_maps, case.spatial, f.into_data())?,
        Conv1x1CapsuleParams::new(
            Matrix::from_vec(case.in_maps, case.out_maps, w.into_data())?,
            case.iters,
        )?,
    ))
}

/// Output maps (`J x S`) computed the way `mode` would.
pub fn run_mode(mode: BenchMode, features: &Matrix, params: &Conv1x1CapsuleParams) -> Result<Matrix> {
    let w = &params.weights;
    match mode {
        BenchMode::Plain => Ok(combine(features, w, &Matrix::from_fn(w.rows(), w.cols(), |_, _| 1.0))),
        BenchMode::Naive => Ok(route_conv1x1_naive(features, params)?.outputs),
        BenchMode::Kernel => {
            let g = gram(features)?;
            let routed = route_conv1x1_kernel(&g, params)?;
            Ok(combine(features, w, &routed.couplings))
        }
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Median wall time of `repeat` runs of `mode` after one warm-up run.
pub fn median_ns(mode: BenchMode, case: &BenchCase, repeat: usize, seed: u64) -> Result<u64> {
    if repeat == 0 {
        return Err(invalid("repeat must be >= 1"));
    }
    let (features, params) = bench_inputs(case, seed)?;
    std::hint::black_box(run_mode(mode, &features, &params)?);
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        std::hint::black_box(run_mode(mode, std::hint::black_box(&features), &params)?);
        times.push(t.elapsed().as_nanos() as u64);
    }
    Ok(median(times))
}

pub fn bench_all(case: &BenchCase, repeat: usize, seed: u64) -> Result<Vec<BenchRow>> {
    BenchMode::ALL
        .iter()
        .map(|&mode| {
            Ok(BenchRow {
                mode,
                case: *case,
                median_ns: median_ns(mode, case, repeat, seed)?,
            })
        })
        .collect()
}

pub const BENCH_CSV_HEADER: &str = "mode,S,I,J,r,median_ns";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode, r.case.spatial, r.case.in_maps, r.case.out_maps, r.case.iters, r.median_ns
        ));
    }
    out
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Time added by each routing iteration: slope of median time over
/// `r in 1..=max_iters` at a fixed spatial size.
pub fn per_iteration_ns(mode: BenchMode, case: &BenchCase, max_iters: usize, repeat: usize, seed: u64) -> Result<f64> {
    let mut rs = Vec::new();
    let mut ts = Vec::new();
    for r in 1..=max_iters {
        rs.push(r as f64);
        ts.push(median_ns(mode, &BenchCase { iters: r, ..*case }, repeat, seed)? as f64);
    }
    Ok(linear_fit(&rs, &ts).0)
}
