//! Finite-difference verification of every differentiable operator and of
//! the composed fusion models, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_many, Tape, Var};
use crate::error::Result;
use crate::metrics::ccc_loss;
use crate::model::{FusionKind, Modality, ModelConfig, ModelGraph, ModelInput};
use crate::params::Binding;
use crate::seq_blocks::{BackboneSpec, ForwardCtx};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const OPERATOR_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const INSTANCES: usize = 5;
/// Composed-model instances with a relu input closer than this to zero are
/// redrawn: a central difference straddling a kink is no oracle.
pub const KINK_MARGIN: f64 = 2e-4;
const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Instances discarded for sitting within [`KINK_MARGIN`] of a kink.
    pub redrawn: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shapes drawn here are non-empty")
}

/// Contracts an output against a fixed random probe so that every output
/// element gets a distinct weight.
fn probe_sum(tape: &mut Tape<f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let z = tape.mul(y, p)?;
    Ok(tape.sum(z))
}

type Instance = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn check(
    name: &str,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    make: impl Fn(&mut ChaCha8Rng) -> Instance,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (inputs, f) = make(rng);
        worst = worst.max(grad_check_many(f, &inputs, STEP)?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances: INSTANCES,
        max_error: worst,
        tolerance,
        redrawn: 0,
    })
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// Elementwise and reduction operators on a random rank-1..3 shape.
fn unary(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape<f64>, Var, usize) -> Result<Var>,
) -> Result<CheckResult> {
    check(name, OPERATOR_TOLERANCE, rng, move |rng| {
        let rank = rng.gen_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| dim(rng) + 1).collect();
        let axis = rng.gen_range(0..rank);
        let x = random(&shape, rng);
        let y_shape = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = op(&mut t, v, axis).expect("operator accepts its own instance");
            t.shape(y).to_vec()
        };
        let probe = random(&y_shape, rng);
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = op(t, v[0], axis)?;
                probe_sum(t, y, &probe)
            }),
        )
    })
}

fn binary(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<CheckResult> {
    check(name, OPERATOR_TOLERANCE, rng, move |rng| {
        let rank = rng.gen_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| dim(rng) + 1).collect();
        // Broadcast the right operand along a random subset of axes.
        let rshape: Vec<usize> = shape.iter().map(|&d| if rng.gen_bool(0.3) { 1 } else { d }).collect();
        let a = random(&shape, rng);
        let b = random(&rshape, rng);
        let probe = random(&shape, rng);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = op(t, v[0], v[1])?;
                probe_sum(t, y, &probe)
            }),
        )
    })
}

/// Every operator of the autodiff engine, [`INSTANCES`] random instances each.
pub fn operator_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = vec![
        unary("relu", rng, |t, x, _| Ok(t.relu(x)))?,
        unary("tanh", rng, |t, x, _| Ok(t.tanh(x)))?,
        unary("softmax", rng, |t, x, a| t.softmax(x, a))?,
        unary("mean", rng, |t, x, a| t.mean(x, a))?,
        unary("variance", rng, |t, x, a| t.variance(x, a))?,
        unary("scale", rng, |t, x, _| Ok(t.scale(x, -1.3)))?,
        unary("add_scalar", rng, |t, x, _| Ok(t.add_scalar(x, 0.7)))?,
        unary("sum", rng, |t, x, _| {
            let s = t.sum(x);
            t.mul(s, s)
        })?,
        unary("narrow", rng, |t, x, a| {
            let len = t.shape(x)[a];
            t.narrow(x, a, len / 2, len - len / 2)
        })?,
        unary("reshape", rng, |t, x, _| {
            let n = t.shape(x).iter().product();
            let r = t.reshape(x, &[n])?;
            t.mul(r, r)
        })?,
        unary("dropout", rng, |t, x, _| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            t.dropout(x, 0.4, true, &mut r)
        })?,
        binary("add", rng, |t, a, b| t.add(a, b))?,
        binary("sub", rng, |t, a, b| t.sub(a, b))?,
        binary("mul", rng, |t, a, b| t.mul(a, b))?,
        binary("div", rng, |t, a, b| {
            let d = t.add_scalar(b, 3.0);
            t.div(a, d)
        })?,
    ];
    out.push(check("concat", OPERATOR_TOLERANCE, rng, |rng| {
        let (m, k1, k2) = (dim(rng), dim(rng), dim(rng));
        let probe = random(&[m, k1 + k2], rng);
        (
            vec![random(&[m, k1], rng), random(&[m, k2], rng)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.concat(v, 1)?;
                probe_sum(t, y, &probe)
            }),
        )
    })?);
    out.push(check("linear", OPERATOR_TOLERANCE, rng, |rng| {
        let (b, din, dout) = (dim(rng), dim(rng), dim(rng));
        let probe = random(&[b, dout], rng);
        let inputs = vec![random(&[b, din], rng), random(&[din, dout], rng), random(&[dout], rng)];
        (
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe_sum(t, y, &probe)
            }),
        )
    })?);
    out.push(check("batch_matmul", OPERATOR_TOLERANCE, rng, |rng| {
        let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
        let trans = rng.gen_bool(0.5);
        let rhs = if trans { [b, n, k] } else { [b, k, n] };
        let probe = random(&[b, m, n], rng);
        (
            vec![random(&[b, m, k], rng), random(&rhs, rng)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.batch_matmul(v[0], v[1], trans)?;
                probe_sum(t, y, &probe)
            }),
        )
    })?);
    out.push(check("conv1d_causal", OPERATOR_TOLERANCE, rng, |rng| {
        let (b, steps, cin, cout) = (dim(rng), rng.gen_range(3..10), dim(rng), dim(rng));
        let (taps, dil) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let probe = random(&[b, steps, cout], rng);
        let inputs = vec![
            random(&[b, steps, cin], rng),
            random(&[taps, cin, cout], rng),
            random(&[cout], rng),
        ];
        (
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv1d_causal(v[0], v[1], Some(v[2]), dil)?;
                probe_sum(t, y, &probe)
            }),
        )
    })?);
    out.push(check("conv2d", OPERATOR_TOLERANCE, rng, |rng| {
        let (n, c, co) = (dim(rng), dim(rng), dim(rng));
        let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
        let k = [1, 3][rng.gen_range(0..2)];
        let (stride, pad) = (rng.gen_range(1..=2), k / 2);
        let probe = random(
            &[n, co, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1],
            rng,
        );
        let inputs = vec![
            random(&[n, c, h, w], rng),
            random(&[co, c, k, k], rng),
            random(&[co], rng),
        ];
        (
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                probe_sum(t, y, &probe)
            }),
        )
    })?);
    out.push(check("gather_rows", OPERATOR_TOLERANCE, rng, |rng| {
        let (n, d) = (dim(rng) + 1, dim(rng));
        let rows: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..n)).collect();
        let probe = random(&[rows.len(), d], rng);
        (
            vec![random(&[n, d], rng)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.gather_rows(v[0], &rows)?;
                probe_sum(t, y, &probe)
            }),
        )
    })?);
    out.push(check("ccc_loss", OPERATOR_TOLERANCE, rng, |rng| {
        let n = rng.gen_range(2..60);
        let target = random(&[n, 2], rng);
        (
            vec![random(&[n, 2], rng)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let tv = t.constant(target.clone());
                ccc_loss(t, v[0], tv)
            }),
        )
    })?);
    Ok(out)
}

/// A model small enough to finite-difference every parameter.
pub fn tiny_model_config(fusion: FusionKind) -> ModelConfig {
    let mut c = ModelConfig::new(fusion, vec![Modality::Visual, Modality::Audio, Modality::Linguistic]);
    c.embed_dim = 3;
    c.attn_dim = 2;
    c.fusion_dim = 3;
    c.visual = BackboneSpec {
        in_channels: 3,
        height: 8,
        width: 8,
        channels: vec![2, 2, 3],
        kernel: 3,
        out_dim: 3,
    };
    c.audio = BackboneSpec {
        in_channels: 1,
        height: 8,
        width: 4,
        channels: vec![2, 2, 2],
        kernel: 3,
        out_dim: 3,
    };
    c.tcn_levels = 2;
    c.tcn_kernel = 2;
    c.tcn_channels = 3;
    c.dropout = 0.0;
    c.linguistic_dim = 4;
    c
}

fn model_check(fusion: FusionKind, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let config = tiny_model_config(fusion);
    let (mut worst, mut accepted, mut redrawn): (f64, usize, usize) = (0.0, 0, 0);
    while accepted < INSTANCES {
        if accepted + redrawn >= MAX_DRAWS {
            return Err(crate::Error::invalid(
                "model_check",
                format!("no instance clear of relu kinks in {MAX_DRAWS} draws"),
            ));
        }
        let model = ModelGraph::<f64>::new(config.clone(), rng.gen())?;
        let (b, steps) = (2, rng.gen_range(2..5));
        let input = ModelInput {
            batch: b,
            steps,
            visual: Some(random(&[b * steps, 3, 8, 8], rng)),
            audio: Some(random(&[b * steps, 1, 8, 4], rng)),
            linguistic: Some(random(&[b, steps, config.linguistic_dim], rng)),
        };
        let target = random(&[b * steps, 2], rng);
        let loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let p = Binding::from_vars(vars.to_vec());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ForwardCtx {
                training: false,
                rng: &mut r,
            };
            let out = model.forward(tape, &p, &input, &mut ctx)?;
            let flat = tape.reshape(out.prediction, &[b * steps, 2])?;
            let tv = tape.constant(target.clone());
            ccc_loss(tape, flat, tv)
        };
        let params = model.store.values();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        loss(&mut tape, &vars)?;
        if tape.relu_margin().is_some_and(|m| m < KINK_MARGIN) {
            redrawn += 1;
            continue;
        }
        worst = worst.max(grad_check_many(loss, &params, STEP)?);
        accepted += 1;
    }
    Ok(CheckResult {
        name: format!("{fusion} model + ccc_loss"),
        instances: INSTANCES,
        max_error: worst,
        tolerance: MODEL_TOLERANCE,
        redrawn,
    })
}

/// Both fusion models end to end with respect to every parameter.
pub fn model_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        model_check(FusionKind::Lfan, &mut rng)?,
        model_check(FusionKind::Can, &mut rng)?,
    ])
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = operator_checks(seed)?;
    out.extend(model_checks(seed)?);
    Ok(out)
}
