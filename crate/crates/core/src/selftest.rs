//! Built-in verification suites run by `dynroute selftest`.
//!
//! Each suite draws its instances from numbered seeds so that a failure can
//! be reproduced from the report alone.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, BatchNormState, NormMode, Padding, PoolMode, Tape, Var};
use crate::data::BBox;
use crate::error::Result;
use crate::evaluation::{auc, auc_pairwise, iobb, region_from_threshold};
use crate::matrix::Matrix;
use crate::model::{build_network, NetworkConfig};
use crate::routing::{gram, route_conv1x1_kernel, route_conv1x1_naive, Conv1x1CapsuleParams, GradMode};
use crate::tensor::Tensor;
use crate::training::{margin_loss, LossConfig};

/// Deliberate defects used to confirm that the suites catch bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Feed `W^T` to the Gram-matrix routing.
    TransposeWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    /// One line per failing instance, naming its seed.
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, seed: u64, outcome: std::result::Result<(), String>) {
        match outcome {
            Ok(()) => self.passed += 1,
            Err(msg) => self.failures.push(format!("seed {seed}: {msg}")),
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total = self.passed + self.failures.len();
        let status = if self.ok() { "PASS" } else { "FAIL" };
        write!(f, "{status} {} {}/{}", self.name, self.passed, total)?;
        for line in &self.failures {
            write!(f, "\n    {line}")?;
        }
        Ok(())
    }
}

/// Random routing instance with `I <= 32`, `J <= 16`, `S <= 256`, `r <= 5`.
pub fn random_routing_instance(seed: u64) -> (Matrix, Conv1x1CapsuleParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = rng.random_range(1..=32);
    let j = rng.random_range(1..=16);
    let s = rng.random_range(1..=256);
    let r = rng.random_range(1..=5);
    let f = Tensor::randn(&[i, s], 1.0, &mut rng).into_data();
    let w = Tensor::randn(&[i, j], 1.0 / (i as f64).sqrt(), &mut rng).into_data();
    (
        Matrix::from_vec(i, s, f).expect("feature shape"),
        Conv1x1CapsuleParams::new(Matrix::from_vec(i, j, w).expect("weight shape"), r).expect("valid params"),
    )
}

/// Largest disagreement between Gram-matrix and element-wise routing in
/// couplings and output norms.
pub fn routing_discrepancy(
    features: &Matrix,
    params: &Conv1x1CapsuleParams,
    mutation: Option<Mutation>,
) -> Result<f64> {
    let naive = route_conv1x1_naive(features, params)?;
    let kernel_params = match mutation {
        Some(Mutation::TransposeWeights) => Conv1x1CapsuleParams::new(params.weights.transpose(), params.iterations)?,
        None => params.clone(),
    };
    let kernel = route_conv1x1_kernel(&gram(features)?, &kernel_params)?;
    if kernel.couplings.cols() != naive.couplings.cols() {
        return Ok(f64::INFINITY);
    }
    let mut worst = naive.couplings.max_abs_diff(&kernel.couplings);
    for (j, k) in kernel.norms.iter().enumerate() {
        let n = naive.outputs.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((n - k).abs());
    }
    Ok(worst)
}

fn routing_equivalence(instances: u64, mutation: Option<Mutation>) -> SuiteResult {
    let mut suite = SuiteResult::new("routing-equivalence");
    for seed in 0..instances {
        let (f, p) = random_routing_instance(seed);
        let outcome = match routing_discrepancy(&f, &p, mutation) {
            Ok(d) if d <= 1e-9 => Ok(()),
            Ok(d) => Err(format!("max discrepancy {d:e}")),
            Err(e) => Err(e.to_string()),
        };
        suite.record(seed, outcome);
    }
    suite
}

fn uniform_coupling(instances: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("uniform-coupling");
    for seed in 0..instances {
        let (f, p) = random_routing_instance(1000 + seed);
        let p = Conv1x1CapsuleParams::new(p.weights, 1).expect("params");
        let outcome = (|| {
            let routed = route_conv1x1_naive(&f, &p).map_err(|e| e.to_string())?;
            let j = p.weights.cols() as f64;
            for out in 0..p.weights.cols() {
                for s in 0..f.cols() {
                    let plain: f64 = (0..f.rows()).map(|i| p.weights.get(i, out) * f.get(i, s)).sum();
                    let d = (routed.outputs.get(out, s) - plain / j).abs();
                    if d > 1e-12 {
                        return Err(format!("output {out} pixel {s} differs by {d:e}"));
                    }
                }
            }
            Ok(())
        })();
        suite.record(1000 + seed, outcome);
    }
    suite
}

fn weighted_sum(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::randn(t.dims(out), 1.0, &mut rng);
    let r = t.constant(r);
    let p = t.mul(out, r)?;
    Ok(t.sum(p))
}

/// Names and worst relative finite-difference errors (`h = 1e-5`) of every
/// differentiable op on random inputs.
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut out = Vec::new();
    let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
    let k = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng);
    let k2 = k.clone();
    out.push((
        "conv2d.input",
        finite_diff_check(
            |t, v| {
                let kk = t.constant(k2.clone());
                let y = t.conv2d(v, kk, 2, Padding::Same)?;
                weighted_sum(t, y, seed)
            },
            &x,
            h,
        )?,
    ));
    let x2 = x.clone();
    out.push((
        "conv2d.kernel",
        finite_diff_check(
            |t, v| {
                let xx = t.constant(x2.clone());
                let y = t.conv2d(xx, v, 1, Padding::Valid)?;
                weighted_sum(t, y, seed)
            },
            &k,
            h,
        )?,
    ));
    for (name, mode) in [("pool2d.max", PoolMode::Max), ("pool2d.avg", PoolMode::Avg)] {
        out.push((
            name,
            finite_diff_check(
                |t, v| {
                    let y = t.pool2d(v, mode, 3, 2, Padding::Same)?;
                    weighted_sum(t, y, seed)
                },
                &x,
                h,
            )?,
        ));
    }
    let gamma = Tensor::randn(&[3], 1.0, &mut rng);
    let beta = Tensor::randn(&[3], 1.0, &mut rng);
    out.push((
        "batchnorm.input",
        finite_diff_check(
            |t, v| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let mut st = BatchNormState::new(3);
                let y = t.batchnorm(v, g, b, &mut st, NormMode::Train)?;
                weighted_sum(t, y, seed)
            },
            &x,
            h,
        )?,
    ));
    let x3 = x.clone();
    out.push((
        "batchnorm.gamma",
        finite_diff_check(
            |t, v| {
                let xx = t.constant(x3.clone());
                let b = t.constant(beta.clone());
                let mut st = BatchNormState::new(3);
                let y = t.batchnorm(xx, v, b, &mut st, NormMode::Train)?;
                weighted_sum(t, y, seed)
            },
            &gamma,
            h,
        )?,
    ));
    // Keep inputs away from the ReLU kink.
    let shifted = Tensor::from_fn(&[2, 3, 5, 5], |i| {
        let v = x.data()[i];
        if v.abs() < 0.05 {
            v + 0.1
        } else {
            v
        }
    });
    out.push((
        "relu",
        finite_diff_check(
            |t, v| {
                let y = t.relu(v);
                weighted_sum(t, y, seed)
            },
            &shifted,
            h,
        )?,
    ));
    let caps_in = Tensor::randn(&[2, 6, 4, 4], 1.0, &mut rng);
    let caps_w = Tensor::randn(&[6, 3], 0.5, &mut rng);
    for iters in [1usize, 2] {
        let w = caps_w.clone();
        let name = if iters == 1 {
            "conv1x1_capsule.input.r1"
        } else {
            "conv1x1_capsule.input.r2"
        };
        out.push((
            name,
            finite_diff_check(
                |t, v| {
                    let ww = t.constant(w.clone());
                    let y = t.conv1x1_capsule(v, ww, iters, GradMode::Last)?;
                    weighted_sum(t, y, seed)
                },
                &caps_in,
                h,
            )?,
        ));
    }
    let ci = caps_in.clone();
    out.push((
        "conv1x1_capsule.weight.r2",
        finite_diff_check(
            |t, v| {
                let xx = t.constant(ci.clone());
                let y = t.conv1x1_capsule(xx, v, 2, GradMode::Last)?;
                weighted_sum(t, y, seed)
            },
            &caps_w,
            h,
        )?,
    ));
    let ci = caps_in.clone();
    out.push((
        "conv1x1_plain",
        finite_diff_check(
            |t, v| {
                let xx = t.constant(ci.clone());
                let y = t.conv1x1_plain(xx, v)?;
                weighted_sum(t, y, seed)
            },
            &caps_w,
            h,
        )?,
    ));
    let prim = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
    let fc_w = Tensor::randn(&[4, 2, 3, 5], 0.5, &mut rng);
    let fw = fc_w.clone();
    out.push((
        "fc_capsule_routing.input.r2",
        finite_diff_check(
            |t, v| {
                let w = t.constant(fw.clone());
                let y = t.fc_capsule_routing(v, w, 2, GradMode::Last)?;
                weighted_sum(t, y, seed)
            },
            &prim,
            h,
        )?,
    ));
    let pr = prim.clone();
    out.push((
        "fc_capsule_routing.weight.r2",
        finite_diff_check(
            |t, v| {
                let x = t.constant(pr.clone());
                let y = t.fc_capsule_routing(x, v, 2, GradMode::Last)?;
                weighted_sum(t, y, seed)
            },
            &fc_w,
            h,
        )?,
    ));
    let pr = prim.clone();
    out.push((
        "fc_capsule_linear",
        finite_diff_check(
            |t, v| {
                let x = t.constant(pr.clone());
                let y = t.fc_capsule_linear(x, v)?;
                weighted_sum(t, y, seed)
            },
            &fc_w,
            h,
        )?,
    ));
    out.push((
        "squash_capsules",
        finite_diff_check(
            |t, v| {
                let y = t.squash_capsules(v)?;
                weighted_sum(t, y, seed)
            },
            &prim,
            h,
        )?,
    ));
    out.push((
        "capsule_norms",
        finite_diff_check(
            |t, v| {
                let y = t.capsule_norms(v)?;
                weighted_sum(t, y, seed)
            },
            &prim,
            h,
        )?,
    ));
    let maps = Tensor::randn(&[2, 16, 2, 2], 1.0, &mut rng);
    out.push((
        "primary_capsules",
        finite_diff_check(
            |t, v| {
                let y = t.primary_capsules(v, 8)?;
                weighted_sum(t, y, seed)
            },
            &maps,
            h,
        )?,
    ));
    let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
    out.push((
        "concat_channels",
        finite_diff_check(
            |t, v| {
                let bb = t.constant(b.clone());
                let y = t.concat_channels(&[v, bb])?;
                weighted_sum(t, y, seed)
            },
            &a,
            h,
        )?,
    ));
    let scores = Tensor::from_fn(&[3, 4], |i| 0.05 + 0.9 * ((i * 7 % 11) as f64 / 11.0));
    let labels = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
    out.push((
        "margin_loss",
        finite_diff_check(|t, v| t.margin_loss(v, &labels, &LossConfig::default()), &scores, h)?,
    ));
    Ok(out)
}

/// Small network for end-to-end checks: 32 x 32 input, r = 2.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        stem_channels: 4,
        transition_channels: 8,
        n_dense_blocks: 1,
        layers_per_block: 2,
        growth_rate: 4,
        bottleneck_width: 2,
        head_channels: 8,
        head_kernel: 3,
        routing_iters: 2,
        caps_dim_class: 4,
        n_classes: 3,
        init_std: 0.2,
        ..NetworkConfig::default()
    }
}

/// Worst relative error between backpropagated and central-difference
/// gradients of the margin loss of a tiny network, over `per_param` entries
/// drawn from every parameter tensor. Relative errors use a denominator
/// floor of `1e-7`: a gradient that is exactly zero (a shift absorbed by a
/// later batch norm) shows up numerically as one ulp of the loss over `2h`,
/// about `1e-11`, and must not count as a relative error of order one.
pub fn end_to_end_gradient_error(seed: u64, per_param: usize) -> Result<f64> {
    let cfg = tiny_network_config();
    let net = build_network(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.random::<f64>());
    let labels = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?;
    let loss_cfg = LossConfig::default();
    let loss_of = |n: &crate::model::Network| -> Result<f64> {
        let mut n = n.clone();
        let pass = n.forward(&images, NormMode::Train)?;
        margin_loss(pass.scores(), &labels, &loss_cfg)
    };
    let mut work = net.clone();
    let pass = work.forward(&images, NormMode::Train)?;
    let mut tape = pass.tape;
    let l = tape.margin_loss(pass.scores, &labels, &loss_cfg)?;
    let grads = tape.backward(l)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (pi, (param, &var)) in net.params().iter().zip(&pass.params).enumerate() {
        let analytic = grads.get_or_zeros(var, &param.value);
        let n = param.value.numel();
        let picks: Vec<usize> = (0..per_param.min(n)).map(|_| rng.random_range(0..n)).collect();
        for idx in picks {
            let mut plus = net.clone();
            plus.params_mut()[pi].value.data_mut()[idx] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi].value.data_mut()[idx] -= h;
            let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
            let a = analytic[idx];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn gradient_checks() -> SuiteResult {
    let mut suite = SuiteResult::new("gradient-checks");
    for seed in 0..2 {
        match op_gradient_errors(seed) {
            Ok(errs) => {
                for (name, e) in errs {
                    suite.record(
                        seed,
                        if e <= 1e-4 {
                            Ok(())
                        } else {
                            Err(format!("{name}: rel err {e:e}"))
                        },
                    );
                }
            }
            Err(e) => suite.record(seed, Err(e.to_string())),
        }
    }
    let outcome = match end_to_end_gradient_error(0, 3) {
        Ok(e) if e <= 1e-3 => Ok(()),
        Ok(e) => Err(format!("end-to-end rel err {e:e}")),
        Err(e) => Err(e.to_string()),
    };
    suite.record(0, outcome);
    suite
}

/// Random scores with heavy ties and labels for AUC checks.
pub fn random_auc_case(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=n.min(20));
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect();
    let labels = (0..n).map(|_| rng.random_bool(0.4)).collect();
    (scores, labels)
}

fn auc_oracle(cases: u64) -> SuiteResult {
    let mut suite = SuiteResult::new("auc-oracle");
    for seed in 0..cases {
        let (s, l) = random_auc_case(seed);
        let (a, b) = (auc(&s, &l), auc_pairwise(&s, &l));
        suite.record(
            seed,
            if a == b {
                Ok(())
            } else {
                Err(format!("rank {a:?} vs pairs {b:?}"))
            },
        );
    }
    suite
}

fn iobb_geometry() -> SuiteResult {
    let mut suite = SuiteResult::new("iobb-geometry");
    let d = BBox::new(0, 0, 10, 10);
    let checks = [
        ("identical", iobb(Some(&d), &d), 1.0),
        ("disjoint", iobb(Some(&d), &BBox::new(10, 0, 5, 5)), 0.0),
        ("half", iobb(Some(&d), &BBox::new(0, 0, 5, 10)), 0.5),
        ("undetected", iobb(None, &d), 0.0),
    ];
    for (k, (name, got, want)) in checks.into_iter().enumerate() {
        suite.record(
            k as u64,
            if got == want {
                Ok(())
            } else {
                Err(format!("{name}: {got} != {want}"))
            },
        );
    }
    let mut map = vec![0.0; 400];
    for y in 4..9 {
        for x in 3..9 {
            map[y * 20 + x] = 1.0;
        }
    }
    map[19 * 20 + 19] = 1.0;
    let r = region_from_threshold(&map, 20, 20, 0.1, false);
    let want = Some(BBox::new(3, 4, 6, 5));
    suite.record(
        4,
        if r.bbox == want {
            Ok(())
        } else {
            Err(format!("region {:?}", r.bbox))
        },
    );
    suite
}

/// Runs every suite; `mutation` injects a defect for mutation testing.
pub fn run_selftest(mutation: Option<Mutation>) -> Vec<SuiteResult> {
    vec![
        routing_equivalence(200, mutation),
        uniform_coupling(50),
        gradient_checks(),
        auc_oracle(1000),
        iobb_geometry(),
    ]
}
