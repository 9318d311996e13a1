//! Finite-difference sweep over every differentiable graph op and every
//! network topology.
//!
//! Each case binds seeded random parameters, reduces the op output to a
//! scalar through a fixed random projection (so no coordinate's gradient
//! cancels by symmetry) and compares reverse-mode gradients against central
//! differences. Coordinates whose perturbation crosses a kink are excluded.
//! `detach` is not swept: its gradient is zero by definition, which finite
//! differences cannot confirm.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nets::{build_classifier, build_discriminator, build_generator, mix_seed, Bound, InitSpec, Mode, Network};
use crate::tensor::{finite_diff_check_with, CheckReport, FdOptions};
use crate::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Op,
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCase {
    pub name: String,
    pub kind: CaseKind,
    pub report: CheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub h: f64,
    pub tol: f64,
    pub cases: Vec<SweepCase>,
    pub passed: bool,
    pub elapsed_s: f64,
}

impl SweepReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub fd: FdOptions,
    /// Coordinates checked per network parameter tensor; ops check all.
    pub network_coords: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            fd: FdOptions::default(),
            network_coords: 64,
        }
    }
}

/// Every op the sweep covers, in report order.
pub const OPS: [&str; 23] = [
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "log",
    "affine",
    "scale",
    "clamp",
    "matmul",
    "conv2d",
    "max_pool2",
    "upsample2",
    "reshape",
    "expand",
    "select_rows",
    "sum",
    "mean",
    "softmax_cross_entropy",
    "l1_distance",
];

pub const NETWORKS: [&str; 3] = ["classifier", "generator", "discriminator"];

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("finite values")
}

/// `sum(y ⊙ w)` for a fixed random `w` of `y`'s shape.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(&shape, -1.0, 1.0, seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn params(entries: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
    entries.iter().map(|(k, t)| (k.to_string(), t.clone())).collect()
}

fn check_op(name: &str, fd: FdOptions) -> Result<CheckReport, TensorError> {
    let s = mix_seed(fd.seed, name);
    let a = random(&[3, 4], -1.0, 1.0, s);
    let b = random(&[3, 4], -1.0, 1.0, s + 1);
    let p = |v: &BTreeMap<String, Var>, k: &str| v[k];
    let unary = |f: fn(&mut Graph, Var) -> Result<Var, TensorError>, x: Tensor| {
        finite_diff_check_with(
            move |g, v| {
                let y = f(g, v["a"])?;
                project(g, y, s + 7)
            },
            &params(&[("a", x)]),
            fd,
        )
    };
    match name {
        "add" | "sub" | "mul" => {
            let which = name.to_string();
            finite_diff_check_with(
                move |g, v| {
                    let y = match which.as_str() {
                        "add" => g.add(p(v, "a"), p(v, "b"))?,
                        "sub" => g.sub(p(v, "a"), p(v, "b"))?,
                        _ => g.mul(p(v, "a"), p(v, "b"))?,
                    };
                    project(g, y, s + 7)
                },
                &params(&[("a", a), ("b", b)]),
                fd,
            )
        }
        "neg" => unary(|g, x| Ok(g.neg(x)), a),
        "relu" => unary(|g, x| Ok(g.relu(x)), a),
        "leaky_relu" => unary(|g, x| Ok(g.leaky_relu(x, 0.2)), a),
        "sigmoid" => unary(|g, x| Ok(g.sigmoid(x)), random(&[3, 4], -3.0, 3.0, s)),
        "tanh" => unary(|g, x| Ok(g.tanh(x)), random(&[3, 4], -2.0, 2.0, s)),
        "log" => unary(|g, x| g.log(x), random(&[3, 4], 0.5, 2.0, s)),
        "affine" => unary(|g, x| Ok(g.affine(x, -1.5, 0.25)), a),
        "scale" => unary(|g, x| Ok(g.scale(x, 3.0)), a),
        "clamp" => unary(|g, x| Ok(g.clamp(x, -0.5, 0.5)), a),
        "matmul" => finite_diff_check_with(
            move |g, v| {
                let y = g.matmul(p(v, "a"), p(v, "b"))?;
                project(g, y, s + 7)
            },
            &params(&[("a", a), ("b", random(&[4, 5], -1.0, 1.0, s + 2))]),
            fd,
        ),
        "conv2d" => {
            let x = random(&[2, 2, 6, 6], -1.0, 1.0, s);
            let k = random(&[3, 2, 3, 3], -0.5, 0.5, s + 1);
            finite_diff_check_with(
                move |g, v| {
                    let y1 = g.conv2d(p(v, "x"), p(v, "k"), 1, 1)?;
                    let y2 = g.conv2d(p(v, "x"), p(v, "k"), 2, 0)?;
                    let l1 = project(g, y1, s + 7)?;
                    let l2 = project(g, y2, s + 8)?;
                    g.add(l1, l2)
                },
                &params(&[("x", x), ("k", k)]),
                fd,
            )
        }
        "max_pool2" => unary(|g, x| g.max_pool2(x), random(&[2, 2, 4, 4], -1.0, 1.0, s)),
        "upsample2" => unary(|g, x| g.upsample2(x), random(&[2, 2, 3, 3], -1.0, 1.0, s)),
        "reshape" => unary(|g, x| g.reshape(x, &[4, 3]), a),
        "expand" => unary(|g, x| g.expand(x, 2, 3), random(&[4], -1.0, 1.0, s)),
        "select_rows" => unary(|g, x| g.select_rows(x, &[2, 0, 2]), a),
        "sum" => unary(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            a,
        ),
        "mean" => unary(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.mean(sq))
            },
            a,
        ),
        "softmax_cross_entropy" => finite_diff_check_with(
            |g, v| g.softmax_cross_entropy(v["z"], &[0, 3, 1]),
            &params(&[("z", random(&[3, 5], -2.0, 2.0, s))]),
            fd,
        ),
        "l1_distance" => finite_diff_check_with(
            move |g, v| g.l1_distance(p(v, "a"), p(v, "b")),
            &params(&[("a", a), ("b", b)]),
            fd,
        ),
        other => Err(TensorError::Contract(format!("no sweep case for op '{other}'"))),
    }
}

fn build_network(name: &str, seed: u64) -> Result<Network> {
    let shape = [1, 16, 16];
    let init = InitSpec::new(mix_seed(seed, name));
    Ok(match name {
        "classifier" => build_classifier(shape, 10, init)?,
        "generator" => build_generator(shape, init)?,
        "discriminator" => build_discriminator(shape, init)?,
        other => return Err(crate::Error::config(format!("unknown network '{other}'"))),
    })
}

fn check_network(name: &str, opts: &SweepOptions) -> Result<CheckReport> {
    let seed = opts.fd.seed;
    let net = build_network(name, seed)?;
    let x = random(&[2, 1, 16, 16], -1.0, 1.0, mix_seed(seed, &format!("{name}/x")));
    let fd = FdOptions {
        max_coords_per_param: Some(opts.network_coords),
        ..opts.fd
    };
    // Dropout runs with a fixed mask so the function is deterministic.
    let mode = Mode::Train {
        dropout_seed: mix_seed(seed, "sweep/dropout"),
    };
    let proj_seed = mix_seed(seed, &format!("{name}/w"));
    let report = finite_diff_check_with(
        |g, vars| {
            let bound = Bound::from_vars("net", vars.clone());
            let xv = g.constant(x.clone());
            let y = net
                .forward(g, &bound, xv, mode)
                .map_err(|e| TensorError::Contract(e.to_string()))?;
            project(g, y, proj_seed)
        },
        net.params(),
        fd,
    )?;
    Ok(report)
}

/// Runs every op case and every network case.
pub fn run_sweep(opts: &SweepOptions) -> Result<SweepReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for op in OPS {
        cases.push(SweepCase {
            name: op.to_string(),
            kind: CaseKind::Op,
            report: check_op(op, opts.fd)?,
        });
    }
    for net in NETWORKS {
        cases.push(SweepCase {
            name: net.to_string(),
            kind: CaseKind::Network,
            report: check_network(net, opts)?,
        });
    }
    Ok(SweepReport {
        h: opts.fd.h,
        tol: opts.fd.tol,
        passed: cases.iter().all(|c| c.report.passed),
        cases,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
