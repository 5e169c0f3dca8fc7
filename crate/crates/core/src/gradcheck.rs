//! Central finite-difference checks of every differentiable operation,
//! run on the f64 path.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::aam_loss;
use crate::nn::{batch_norm_train, conv2d, linear, temporal_stats_pool, BasicBlock, Ctx, Module, TemporalPooling};
use crate::se::{integrate_se, se_apply, squeeze, Integration, SeConfig, SeUnit, SqueezePooling};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-3;
pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;
/// Attempts per seed for piecewise-linear composites.
pub const MAX_ATTEMPTS: usize = 3;

/// Builds the op output from leaf values. Returns the output and the
/// leaf handles that gradients are compared for, in input order.
pub type Builder = dyn for<'t> Fn(&'t Tape<f64>, &[Tensor<f64>]) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>)>;

/// Outcome of one op over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    /// Largest `|analytic − numeric| / (atol + rtol·|numeric|)`; ≤ 1 passes.
    pub worst_ratio: f64,
    pub worst_abs: f64,
    /// Fresh inputs drawn after a failed attempt on a piecewise-linear
    /// composite (a ReLU kink inside the probe step).
    pub redraws: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0 && self.checked > 0
    }
}

fn eval(build: &Builder, inputs: &[Tensor<f64>], proj: &Option<Tensor<f64>>) -> Result<f64> {
    let tape = Tape::new();
    let (out, _) = build(&tape, inputs)?;
    // Scalar objective: Σ out ⊙ R for the fixed projection R.
    let v = out.value();
    Ok(match proj {
        Some(p) => v.data().iter().zip(p.data()).map(|(a, b)| a * b).sum(),
        None => v.sum(),
    })
}

/// Compares reverse-mode gradients against central differences for one
/// set of inputs. `project` multiplies the output by a random tensor so a
/// scalar output is not required.
pub fn check_once(build: &Builder, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<(usize, f64, f64)> {
    let tape = Tape::new();
    let (out, leaves) = build(&tape, inputs)?;
    let shape = out.shape();
    let proj = if shape.iter().product::<usize>() == 1 {
        None
    } else {
        Some(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)))
    };
    let loss = match &proj {
        Some(p) => out.mul(tape.constant(p.clone()))?.sum(),
        None => out.sum(),
    };
    tape.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = leaves.iter().map(|v| v.grad()).collect();
    drop(leaves);

    let (mut checked, mut worst_ratio, mut worst_abs) = (0, 0f64, 0f64);
    for (k, a) in analytic.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let a = a.as_ref().unwrap_or(&zeros);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += EPSILON;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= EPSILON;
            let numeric = (eval(build, &plus, &proj)? - eval(build, &minus, &proj)?) / (2.0 * EPSILON);
            let diff = (a.data()[i] - numeric).abs();
            worst_abs = worst_abs.max(diff);
            worst_ratio = worst_ratio.max(diff / (ATOL + RTOL * numeric.abs()));
            checked += 1;
        }
    }
    Ok((checked, worst_ratio, worst_abs))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Uniform values kept clear of zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..2.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Distinct values per channel, at least 0.05 apart, so max pooling has a
/// unique winner under the probe step.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize], group: usize) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n / group {
        let mut vals: Vec<f64> = (0..group)
            .map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / group as f64 + rng.random_range(-0.02..0.02))
            .collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        data.extend(vals);
    }
    Tensor::new(shape.to_vec(), data).expect("shape")
}

struct Case {
    name: String,
    /// Contains ReLUs whose kinks can land within `EPSILON` of the input.
    piecewise: bool,
    make_inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    build: Box<Builder>,
}

fn leaves<'t>(tape: &'t Tape<f64>, inputs: &[Tensor<f64>]) -> Vec<Var<'t, f64>> {
    inputs.iter().map(|t| tape.param(t.clone())).collect()
}

fn simple(
    name: &str,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    op: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
) -> Case {
    Case {
        name: name.into(),
        piecewise: false,
        make_inputs: Box::new(make_inputs),
        build: Box::new(move |tape, inputs| {
            let v = leaves(tape, inputs);
            Ok((op(&v)?, v))
        }),
    }
}

fn se_cfg(pooling: SqueezePooling, h: usize, integration: Integration) -> SeConfig {
    SeConfig {
        pooling,
        reduction: 2,
        hidden_layers: h,
        integration,
        ..SeConfig::default()
    }
}

/// Runs `forward` on a module whose parameters are the inputs after the
/// first; the first input is the data tensor.
fn module_case<M: Module<f64> + Clone + 'static>(
    name: String,
    make_module: impl Fn(&mut ChaCha8Rng) -> M + 'static,
    x_shape: Vec<usize>,
    forward: impl for<'t> Fn(&mut M, &mut Ctx<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>> + 'static,
) -> Case {
    let proto = std::rc::Rc::new(std::cell::RefCell::new(None::<M>));
    let proto_in = proto.clone();
    Case {
        name,
        piecewise: true,
        make_inputs: Box::new(move |rng| {
            let mut m = make_module(rng);
            // Nonzero biases so every parameter receives gradient.
            for p in m.params_mut() {
                let shape = p.value.shape().to_vec();
                p.value = Tensor::from_fn(&shape, |_| rng.random_range(-0.8..0.8));
            }
            let mut inputs = vec![uniform(rng, &x_shape)];
            inputs.extend(m.params().iter().map(|p| p.value.clone()));
            *proto_in.borrow_mut() = Some(m);
            inputs
        }),
        build: Box::new(move |tape, inputs| {
            let mut m = proto.borrow().clone().expect("inputs generated first");
            for (p, v) in m.params_mut().into_iter().zip(&inputs[1..]) {
                p.value = v.clone();
            }
            let mut ctx = Ctx::train(tape);
            let x = tape.param(inputs[0].clone());
            let out = forward(&mut m, &mut ctx, x)?;
            let mut vars = vec![x];
            vars.extend(m.params().iter().map(|p| ctx.param(p)));
            Ok((out, vars))
        }),
    }
}

fn cases() -> Vec<Case> {
    let mut v = vec![
        simple(
            "conv2d",
            |r| vec![uniform(r, &[2, 2, 5, 5]), uniform(r, &[3, 2, 3, 3]), uniform(r, &[3])],
            |i| conv2d(i[0], i[1], Some(i[2]), (1, 1), (1, 1)),
        ),
        simple(
            "conv2d_stride2",
            |r| vec![uniform(r, &[2, 2, 6, 5]), uniform(r, &[3, 2, 3, 3])],
            |i| conv2d(i[0], i[1], None, (2, 2), (1, 1)),
        ),
        simple(
            "conv2d_1x1_shortcut",
            |r| vec![uniform(r, &[1, 3, 5, 4]), uniform(r, &[2, 3, 1, 1])],
            |i| conv2d(i[0], i[1], None, (2, 2), (0, 0)),
        ),
        simple(
            "batchnorm",
            |r| vec![uniform(r, &[2, 3, 4, 4]), uniform(r, &[3]), uniform(r, &[3])],
            |i| Ok(batch_norm_train(i[0], i[1], i[2], 1e-5)?.0),
        ),
        simple(
            "linear",
            |r| vec![uniform(r, &[4, 5]), uniform(r, &[3, 5]), uniform(r, &[3])],
            |i| linear(i[0], i[1], Some(i[2])),
        ),
        simple("matmul", |r| vec![uniform(r, &[3, 4]), uniform(r, &[4, 2])], |i| i[0].matmul(i[1])),
        simple("relu", |r| vec![off_zero(r, &[3, 7])], |i| Ok(i[0].relu())),
        simple("sigmoid", |r| vec![uniform(r, &[3, 7])], |i| Ok(i[0].sigmoid())),
        simple("log_softmax", |r| vec![uniform(r, &[3, 5])], |i| i[0].log_softmax(1)),
        simple(
            "broadcast_mul_add",
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[3, 1]), uniform(r, &[4])],
            |i| i[0].mul(i[1])?.add(i[2]),
        ),
        simple(
            "div",
            |r| vec![uniform(r, &[2, 3]), off_zero(r, &[2, 3])],
            |i| i[0].div(i[1]),
        ),
        simple("squeeze_max", |r| vec![well_separated(r, &[2, 3, 4, 4], 16)], |i| squeeze(i[0], SqueezePooling::Max)),
        simple("squeeze_mean", |r| vec![uniform(r, &[2, 3, 4, 4])], |i| squeeze(i[0], SqueezePooling::Mean)),
        simple("squeeze_std", |r| vec![uniform(r, &[2, 3, 4, 4])], |i| squeeze(i[0], SqueezePooling::Std)),
        simple(
            "squeeze_mean_std",
            |r| vec![uniform(r, &[2, 3, 4, 4])],
            |i| squeeze(i[0], SqueezePooling::MeanStd),
        ),
        simple(
            "se_apply",
            |r| {
                let s = Tensor::from_fn(&[2, 3], |_| r.random_range(0.05..0.95));
                vec![uniform(r, &[2, 3, 3, 4]), s]
            },
            |i| se_apply(i[0], i[1]),
        ),
        simple(
            "temporal_stats_pool_mean",
            |r| vec![uniform(r, &[2, 3, 2, 5])],
            |i| temporal_stats_pool(i[0], TemporalPooling::Mean),
        ),
        simple(
            "temporal_stats_pool_mean_std",
            |r| vec![uniform(r, &[2, 3, 2, 5])],
            |i| temporal_stats_pool(i[0], TemporalPooling::MeanStd),
        ),
        simple(
            "aam_loss",
            |r| vec![uniform(r, &[4, 8]), uniform(r, &[5, 8])],
            |i| Ok(aam_loss(i[0], i[1], &[0, 3, 1, 4], 30.0, 0.4)?.0),
        ),
        simple(
            "aam_loss_no_margin",
            |r| vec![uniform(r, &[4, 8]), uniform(r, &[5, 8])],
            |i| Ok(aam_loss(i[0], i[1], &[2, 2, 0, 1], 30.0, 0.0)?.0),
        ),
    ];
    for h in [1, 2, 3] {
        v.push(module_case(
            format!("excite_h{h}"),
            move |r| SeUnit::<f64>::new("se", 4, &se_cfg(SqueezePooling::Mean, h, Integration::Standard), r).unwrap(),
            vec![3, 4],
            |m, ctx, z| m.excite(ctx, z),
        ));
    }
    for integration in Integration::ALL {
        v.push(module_case(
            format!("se_block_{}", integration.as_str()),
            move |r| {
                let block = BasicBlock::<f64>::new("b", 2, 4, 2, r);
                integrate_se(block, &se_cfg(SqueezePooling::MeanStd, 2, integration), r).unwrap()
            },
            vec![2, 2, 4, 4],
            |m, ctx, x| Ok(m.forward(ctx, x)?.0),
        ));
    }
    v
}

/// Names of all checks, in run order.
pub fn case_names() -> Vec<String> {
    cases().into_iter().map(|c| c.name).collect()
}

/// Runs every case on `seeds` seeds; `on_done` sees each report as it
/// finishes.
pub fn run_suite(seeds: usize, mut on_done: impl FnMut(&OpReport, f64)) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for case in cases() {
        let start = Instant::now();
        let mut report = OpReport {
            name: case.name.clone(),
            seeds,
            checked: 0,
            worst_ratio: 0.0,
            worst_abs: 0.0,
            redraws: 0,
        };
        let attempts = if case.piecewise { MAX_ATTEMPTS } else { 1 };
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6c0d_e000 + seed);
            for attempt in 0..attempts {
                let inputs = (case.make_inputs)(&mut rng);
                let (n, ratio, abs) = check_once(&*case.build, &inputs, &mut rng)?;
                if ratio > 1.0 && attempt + 1 < attempts {
                    report.redraws += 1;
                    continue;
                }
                report.checked += n;
                report.worst_ratio = report.worst_ratio.max(ratio);
                report.worst_abs = report.worst_abs.max(abs);
                break;
            }
        }
        on_done(&report, start.elapsed().as_secs_f64());
        out.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x² recorded with a deliberately wrong backward (x instead of 2x).
        let build: Box<Builder> = Box::new(|tape, inputs| {
            let x = tape.param(inputs[0].clone());
            let sq = x.value().map(|v| v * v);
            let y = tape.record(
                sq,
                &[x],
                Box::new(|p, _, g| vec![Some(Tensor::from_fn(p[0].shape(), |i| p[0].data()[i] * g.data()[i]))]),
            );
            Ok((y, vec![x]))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![Tensor::new([3], vec![1.0, -1.5, 2.0]).unwrap()];
        let (_, ratio, _) = check_once(&*build, &inputs, &mut rng).unwrap();
        assert!(ratio > 1.0);
    }

    #[test]
    fn names_are_unique() {
        let names = case_names();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }
}
