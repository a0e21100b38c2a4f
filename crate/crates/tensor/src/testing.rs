//! Finite-difference gradient oracle, compiled for tests only (`testing`
//! feature). It evaluates ops forward on a non-recording tape and never
//! touches the backward rules it is used to check.

use rand::{Rng, RngCore};

use crate::error::Result;
use crate::ops::{bilinear_resize, concat, softmax_attention};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Central differences of a scalar function with respect to each element of `x`.
pub fn central_difference(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> Result<f64>) -> Result<Tensor<f64>> {
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.push((f(&plus)? - f(&minus)?) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// Elementwise `|a − n| / max(|a|, |n|, floor)`, maximized.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub type OpFn = for<'a, 't> fn(&'a [Var<'t, f64>]) -> Result<Var<'t, f64>>;
pub type InputFn = fn(&mut dyn RngCore) -> Vec<Tensor<f64>>;

/// Max relative error between reverse-mode and finite-difference gradients
/// of `Σ w ⊙ op(inputs)` for a random weight tensor `w`, over all inputs.
pub fn check_op(op: OpFn, inputs: &[Tensor<f64>], rng: &mut dyn RngCore) -> Result<f64> {
    let probe = Tape::<f64>::no_grad();
    let vars: Vec<_> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out_shape = op(&vars)?.shape().to_vec();
    let weights = Tensor::<f64>::uniform(&out_shape, -1.0, 1.0, rng);

    let loss_of = |ins: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::no_grad();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let w = tape.constant(weights.clone());
        op(&vars)?.mul(&w)?.sum_all()?.item()
    };

    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.watch(t.clone())).collect();
    let w = tape.constant(weights.clone());
    let loss = op(&vars)?.mul(&w)?.sum_all()?;
    let grads = tape.backward(&loss)?;

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()));
        let numeric = central_difference(&inputs[i], FD_STEP, |x| {
            let mut ins = inputs.to_vec();
            ins[i] = x.clone();
            loss_of(&ins)
        })?;
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-6));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

fn dims(rng: &mut dyn RngCore, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn randn(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

fn positive(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Every differentiable op with an input generator for random small cases.
pub fn op_catalog() -> Vec<(&'static str, InputFn, OpFn)> {
    vec![
        ("add", |r| {
            let s = dims(r, 3, 1, 4);
            vec![randn(&s, r), randn(&s[1..], r)]
        }, |v| v[0].add(&v[1])),
        ("sub", |r| {
            let s = dims(r, 2, 1, 4);
            vec![randn(&[s[0], 1], r), randn(&s, r)]
        }, |v| v[0].sub(&v[1])),
        ("mul", |r| {
            let s = dims(r, 3, 1, 4);
            vec![randn(&s, r), randn(&[s[0], 1, s[2]], r)]
        }, |v| v[0].mul(&v[1])),
        ("div", |r| {
            let s = dims(r, 2, 1, 4);
            vec![randn(&s, r), positive(&s[1..], r)]
        }, |v| v[0].div(&v[1])),
        ("exp", |r| vec![randn(&dims(r, 2, 1, 5), r)], |v| v[0].exp()),
        ("log", |r| vec![positive(&dims(r, 2, 1, 5), r)], |v| v[0].log()),
        ("gelu", |r| vec![randn(&dims(r, 2, 1, 5), r).map(|x| 2.0 * x)], |v| v[0].gelu()),
        ("silu", |r| vec![randn(&dims(r, 2, 1, 5), r).map(|x| 2.0 * x)], |v| v[0].silu()),
        ("abs", |r| vec![randn(&dims(r, 2, 1, 5), r)], |v| v[0].abs()),
        ("square", |r| vec![randn(&dims(r, 2, 1, 5), r)], |v| v[0].square()),
        ("sqrt", |r| vec![positive(&dims(r, 2, 1, 5), r)], |v| v[0].sqrt()),
        ("scale_offset", |r| vec![randn(&dims(r, 2, 1, 5), r)], |v| v[0].scale(-1.7)?.offset(0.3)?.neg()),
        ("sum_axis", |r| vec![randn(&dims(r, 3, 1, 4), r)], |v| v[0].sum_axis(1, false)),
        ("mean", |r| vec![randn(&dims(r, 3, 1, 4), r)], |v| v[0].mean_axis(2, true)?.mean_all()),
        ("broadcast_to", |r| {
            let s = dims(r, 2, 1, 4);
            vec![randn(&[s[0], 1], r)]
        }, |v| {
            let s = v[0].shape()[0];
            v[0].broadcast_to(&[3, s, 4])
        }),
        ("reshape_permute", |r| vec![randn(&dims(r, 3, 1, 4), r)], |v| {
            let s = v[0].shape().to_vec();
            v[0].permute(&[2, 0, 1])?.reshape(&[s[2] * s[0], s[1]])?.square()
        }),
        ("narrow_concat", |r| {
            let s = dims(r, 2, 2, 5);
            vec![randn(&s, r), randn(&[s[0], 2], r)]
        }, |v| {
            let n = v[0].shape()[1];
            let a = v[0].narrow(1, 1, n - 1)?;
            concat(&[&a, &v[1], &v[0]], 1)?.square()
        }),
        ("matmul", |r| {
            let d = dims(r, 3, 1, 4);
            vec![randn(&[d[0], d[1]], r), randn(&[d[1], d[2]], r)]
        }, |v| v[0].matmul(&v[1])),
        ("matmul_batched", |r| {
            let d = dims(r, 4, 1, 3);
            vec![randn(&[2, 1, d[0], d[1]], r), randn(&[d[3], d[1], d[2]], r)]
        }, |v| v[0].matmul(&v[1])),
        ("layer_norm", |r| {
            let d = dims(r, 2, 2, 6);
            vec![randn(&d, r), randn(&[d[1]], r), randn(&[d[1]], r)]
        }, |v| v[0].layer_norm(Some(&v[1]), Some(&v[2]), 1e-5)),
        ("layer_norm_plain", |r| vec![randn(&dims(r, 3, 2, 5), r)], |v| v[0].layer_norm(None, None, 1e-6)),
        ("softmax_attention", |r| {
            let t = r.gen_range(1..=4);
            let dh = r.gen_range(1..=3);
            (0..3).map(|_| randn(&[1, 2, t, dh], r)).collect()
        }, |v| softmax_attention(&v[0], &v[1], &v[2])),
        ("bilinear_resize", |r| {
            let s = dims(r, 3, 1, 4);
            vec![randn(&s, r)]
        }, |v| {
            let (h, w) = (v[0].shape()[0], v[0].shape()[1]);
            bilinear_resize(&v[0], 2 * h + 1, (w + 1) / 2 + 1)
        }),
    ]
}

/// Runs every op in [`op_catalog`] on `cases` random inputs.
pub fn check_all_ops(cases: usize, rng: &mut dyn RngCore) -> Result<Vec<OpCheck>> {
    op_catalog()
        .into_iter()
        .map(|(op, gen, f)| {
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                let inputs = gen(rng);
                worst = worst.max(check_op(f, &inputs, rng)?);
            }
            Ok(OpCheck { op, cases, max_rel_err: worst })
        })
        .collect()
}
