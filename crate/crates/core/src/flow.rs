//! Straight-path flow matching: interpolation, velocity targets, training
//! losses and the Euler sampler.

use ppd_tensor::{adamw_step, AdamState, AdamW, Element, ParamStore, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dit::Dit;
use crate::error::{CoreError, Result};
use crate::fusion::SemanticBatch;
use crate::nn::Bind;

/// Half-width of the band a normalized map is expected to occupy, with a
/// little slack over the nominal 0.5.
pub const NORMALIZED_BAND: f64 = 0.55;
/// Fraction of values allowed outside the band: percentile normalization
/// leaves about 2% below and 2% above by construction.
pub const NORMALIZED_TAIL: f64 = 0.04;

/// One point on the straight path between clean depth `x0` (t = 0) and
/// noise `x1` (t = 1).
#[derive(Debug, Clone)]
pub struct FlowSample<E: Element> {
    pub x0: Tensor<E>,
    pub x1: Tensor<E>,
    pub t: f64,
    pub x_t: Tensor<E>,
    pub v_target: Tensor<E>,
}

/// Rejects maps that cannot be percentile-normalized depth: non-finite
/// values or more than the expected tails outside the band.
pub fn check_normalized_range<E: Element>(x0: &Tensor<E>) -> Result<()> {
    let n = x0.numel();
    let mut outside = 0usize;
    for &v in x0.data() {
        let v = v.to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(CoreError::contract("make_flow_sample", "x0 holds non-finite values"));
        }
        if v.abs() > NORMALIZED_BAND {
            outside += 1;
        }
    }
    let allowed = NORMALIZED_TAIL * n as f64 + 2.0;
    if outside as f64 > allowed {
        return Err(CoreError::contract(
            "make_flow_sample",
            format!("{outside} of {n} values lie outside ±{NORMALIZED_BAND}; x0 is not a normalized depth map"),
        ));
    }
    Ok(())
}

/// `x_t = t·x1 + (1 − t)·x0`, `v = x1 − x0`.
pub fn flow_sample_at<E: Element>(x0: &Tensor<E>, x1: &Tensor<E>, t: f64) -> Result<FlowSample<E>> {
    if x0.shape() != x1.shape() {
        return Err(CoreError::contract("flow_sample", format!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::contract("flow_sample", format!("t = {t} outside [0, 1]")));
    }
    let (te, se) = (E::of(t), E::of(1.0 - t));
    let mut x_t = x0.clone();
    let mut v = x0.clone();
    for (((xt, vt), &a), &b) in x_t.data_mut().iter_mut().zip(v.data_mut()).zip(x0.data()).zip(x1.data()) {
        *xt = te * b + se * a;
        *vt = b - a;
    }
    Ok(FlowSample { x0: x0.clone(), x1: x1.clone(), t, x_t, v_target: v })
}

/// Draws `x1 ~ N(0, I)` and `t ~ U(0, 1)`.
pub fn make_flow_sample<E: Element>(x0: &Tensor<E>, rng: &mut impl Rng) -> Result<FlowSample<E>> {
    check_normalized_range(x0)?;
    let x1 = standard_normal(x0.shape(), rng);
    let t = rng.gen::<f64>();
    flow_sample_at(x0, &x1, t)
}

pub fn standard_normal<E: Element>(shape: &[usize], rng: &mut impl Rng) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::of(StandardNormal.sample(rng)))
}

/// Mean squared error over all elements.
pub fn velocity_loss<'t, E: Element>(pred: &Var<'t, E>, target: &Var<'t, E>) -> Result<Var<'t, E>> {
    if pred.shape() != target.shape() {
        return Err(CoreError::contract("velocity_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    Ok(pred.sub(target)?.square()?.mean_all()?)
}

/// Mean absolute difference of forward-difference gradients of `[B, H, W]`
/// (or `[B, H, W, 1]`) fields, summed over `scales` levels with 2×2 average
/// pooling between levels.
pub fn gradient_matching_loss<'t, E: Element>(pred: &Var<'t, E>, target: &Var<'t, E>, scales: usize) -> Result<Var<'t, E>> {
    if pred.shape() != target.shape() {
        return Err(CoreError::contract("gradient_matching_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (b, h, w) = match *pred.shape() {
        [b, h, w] | [b, h, w, 1] => (b, h, w),
        ref s => return Err(CoreError::contract("gradient_matching_loss", format!("expected [B, H, W], got {s:?}"))),
    };
    if scales == 0 || scales >= usize::BITS as usize || h < 1 << scales || w < 1 << scales {
        return Err(CoreError::contract(
            "gradient_matching_loss",
            format!("{h}x{w} is too small for {scales} scales (needs at least 2^{scales})"),
        ));
    }
    let mut diff = pred.sub(target)?.reshape(&[b, h, w])?;
    let (mut h, mut w) = (h, w);
    let mut total: Option<Var<'t, E>> = None;
    for s in 0..scales {
        if s > 0 {
            let (h2, w2) = (h / 2, w / 2);
            diff = diff
                .narrow(1, 0, 2 * h2)?
                .narrow(2, 0, 2 * w2)?
                .reshape(&[b, h2, 2, w2, 2])?
                .mean_axis(4, false)?
                .mean_axis(2, false)?;
            (h, w) = (h2, w2);
        }
        let gx = diff.narrow(2, 1, w - 1)?.sub(&diff.narrow(2, 0, w - 1)?)?.abs()?.mean_all()?;
        let gy = diff.narrow(1, 1, h - 1)?.sub(&diff.narrow(1, 0, h - 1)?)?.abs()?.mean_all()?;
        let level = gx.add(&gy)?;
        total = Some(match total {
            None => level,
            Some(acc) => acc.add(&level)?,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Decreasing times `1 = t_n > … > t_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    times: Vec<f64>,
}

impl SamplerSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        let ok = times.len() >= 2
            && times[0] == 1.0
            && *times.last().expect("nonempty") == 0.0
            && times.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(CoreError::Config(format!("sampler schedule must decrease strictly from 1 to 0, got {times:?}")));
        }
        Ok(SamplerSchedule { times })
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::Config("sampler needs at least one step".into()));
        }
        Self::new((0..=steps).map(|i| if i == steps { 0.0 } else { 1.0 - i as f64 / steps as f64 }).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// A velocity field with its conditioning already bound.
pub trait VelocityField<E: Element> {
    fn velocity(&self, x_t: &Tensor<E>, t: f64) -> Result<Tensor<E>>;
}

impl<E: Element, F: Fn(&Tensor<E>, f64) -> Result<Tensor<E>>> VelocityField<E> for F {
    fn velocity(&self, x_t: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
        self(x_t, t)
    }
}

/// Euler steps `x ← x + v(x, t_i)·(t_{i−1} − t_i)` from `x1` at t = 1 down to t = 0.
pub fn integrate<E: Element>(field: &impl VelocityField<E>, x1: Tensor<E>, schedule: &SamplerSchedule) -> Result<Tensor<E>> {
    let mut x = x1;
    for w in schedule.times().windows(2) {
        let v = field.velocity(&x, w[0])?;
        if v.shape() != x.shape() {
            return Err(CoreError::contract("sample", format!("velocity {:?} for state {:?}", v.shape(), x.shape())));
        }
        let dt = E::of(w[1] - w[0]);
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi = *xi + vi * dt;
        }
    }
    Ok(x)
}

/// Draws `x1 ~ N(0, I)` of `shape` and integrates to t = 0. There is no
/// depth argument: sampling only sees what `field` was conditioned on.
pub fn sample<E: Element>(
    field: &impl VelocityField<E>,
    shape: &[usize],
    schedule: &SamplerSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<E>> {
    integrate(field, standard_normal(shape, rng), schedule)
}

/// A DiT with its parameters and conditioning, evaluated without gradients.
pub struct DitField<'a, E: Element> {
    pub model: &'a Dit,
    pub params: &'a ParamStore<E>,
    /// `[B, H, W, C]` conditioning images.
    pub images: &'a Tensor<E>,
    pub sem: Option<&'a SemanticBatch<E>>,
}

impl<E: Element> VelocityField<E> for DitField<'_, E> {
    fn velocity(&self, x_t: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
        let tape = Tape::no_grad();
        let p = Bind::new(self.params, &tape);
        let b = x_t.shape()[0];
        let v = self.model.forward(&p, &tape.constant(x_t.clone()), &tape.constant(self.images.clone()), &vec![t; b], self.sem)?;
        Ok(v.into_value())
    }
}

/// Which signal the gradient-matching term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSpace {
    /// Predicted against target velocity.
    Velocity,
    /// Implied clean depth `x_t − t·v̂` against `x0`.
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_g: f64,
    pub grad_scales: usize,
    pub grad_space: GradientSpace,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_g: 0.5, grad_scales: 4, grad_space: GradientSpace::Velocity }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0) || !self.lambda_g.is_finite() || self.grad_scales == 0 {
            return Err(CoreError::Config(format!(
                "lambda_g must be finite and non-negative and grad_scales positive, got {} and {}",
                self.lambda_g, self.grad_scales
            )));
        }
        Ok(())
    }
}

/// Training pairs: conditioning images `[B, H, W, C]`, clean normalized
/// depth `[B, H, W, 1]` and optional precomputed semantics.
#[derive(Debug, Clone)]
pub struct FlowBatch<E: Element> {
    pub ids: Vec<String>,
    pub images: Tensor<E>,
    pub x0: Tensor<E>,
    pub sem: Option<SemanticBatch<E>>,
}

/// Per-sample noise and times for one batch.
#[derive(Debug, Clone)]
pub struct FlowDraw<E: Element> {
    pub x1: Tensor<E>,
    pub t: Vec<f64>,
}

impl<E: Element> FlowDraw<E> {
    pub fn random(batch: &FlowBatch<E>, rng: &mut impl Rng) -> Self {
        let x1 = standard_normal(batch.x0.shape(), rng);
        let t = (0..batch.x0.shape()[0]).map(|_| rng.gen::<f64>()).collect();
        FlowDraw { x1, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub velocity: f64,
    pub gradient: f64,
    pub total: f64,
}

/// Builds `x_t` per sample and returns `(total, velocity, gradient)` losses.
pub fn flow_loss<'t, E: Element>(
    model: &Dit,
    p: &Bind<'_, 't, E>,
    batch: &FlowBatch<E>,
    draw: &FlowDraw<E>,
    cfg: &LossConfig,
) -> Result<(Var<'t, E>, Var<'t, E>, Var<'t, E>)> {
    let shape = batch.x0.shape().to_vec();
    let b = shape[0];
    if draw.x1.shape() != shape.as_slice() || draw.t.len() != b {
        return Err(CoreError::contract("flow_loss", "noise draw does not match the batch"));
    }
    let per = batch.x0.numel() / b.max(1);
    let mut x_t = batch.x0.clone();
    let mut v = batch.x0.clone();
    let mut t_map = Vec::with_capacity(batch.x0.numel());
    for i in 0..b {
        let x0 = Tensor::new(&[per], batch.x0.data()[i * per..(i + 1) * per].to_vec())?;
        let x1 = Tensor::new(&[per], draw.x1.data()[i * per..(i + 1) * per].to_vec())?;
        let fs = flow_sample_at(&x0, &x1, draw.t[i])?;
        x_t.data_mut()[i * per..(i + 1) * per].copy_from_slice(fs.x_t.data());
        v.data_mut()[i * per..(i + 1) * per].copy_from_slice(fs.v_target.data());
        t_map.extend(std::iter::repeat(E::of(draw.t[i])).take(per));
    }
    let x_t = p.constant(x_t);
    let target = p.constant(v);
    let pred = model.forward(p, &x_t, &p.constant(batch.images.clone()), &draw.t, batch.sem.as_ref())?;
    let vel = velocity_loss(&pred, &target)?;
    let grad = match cfg.grad_space {
        GradientSpace::Velocity => gradient_matching_loss(&pred, &target, cfg.grad_scales)?,
        GradientSpace::Depth => {
            let t_map = p.constant(Tensor::new(&shape, t_map)?);
            let x0_hat = x_t.sub(&pred.mul(&t_map)?)?;
            gradient_matching_loss(&x0_hat, &p.constant(batch.x0.clone()), cfg.grad_scales)?
        }
    };
    let total = if cfg.lambda_g == 0.0 { vel.clone() } else { vel.add(&grad.scale(cfg.lambda_g)?)? };
    Ok((total, vel, grad))
}

/// One optimizer step on `velocity_loss + λ_g · gradient_matching_loss`.
/// Non-finite losses abort before any parameter changes.
pub fn train_step<E: Element>(
    model: &Dit,
    params: &mut ParamStore<E>,
    state: &mut AdamState<E>,
    opt: &AdamW,
    batch: &FlowBatch<E>,
    draw: &FlowDraw<E>,
    cfg: &LossConfig,
) -> Result<StepLosses> {
    let step = state.step + 1;
    let non_finite = |what: &'static str| CoreError::NonFinite { what, step, ids: batch.ids.join(",") };
    let tape = Tape::new();
    let computed = (|| {
        let p = Bind::new(&*params, &tape);
        let (total, vel, grad) = flow_loss(model, &p, batch, draw, cfg)?;
        let losses = StepLosses {
            velocity: vel.item()?.to_f64().unwrap_or(f64::NAN),
            gradient: grad.item()?.to_f64().unwrap_or(f64::NAN),
            total: total.item()?.to_f64().unwrap_or(f64::NAN),
        };
        if !losses.total.is_finite() {
            return Err(non_finite("loss"));
        }
        Ok((losses, tape.backward(&total)?))
    })();
    let (losses, grads) = computed.map_err(|e| match e {
        CoreError::Tensor(TensorError::NonFinite { op }) => non_finite(op),
        other => other,
    })?;
    params.zero_grad();
    params.accumulate(&grads);
    adamw_step(params, state, opt);
    params.zero_grad();
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(SamplerSchedule::uniform(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(SamplerSchedule::uniform(1).unwrap().steps(), 1);
        assert!(SamplerSchedule::uniform(0).is_err());
        assert!(SamplerSchedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(SamplerSchedule::new(vec![0.0, 1.0]).is_err());
        assert!(SamplerSchedule::new(vec![1.0, 0.2]).is_err());
    }

    #[test]
    fn loss_basics() {
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(Tensor::from_fn(&[1, 4, 4], |i| (i as f64).sin()));
        let b = tape.constant(a.value().map(|v| v + 1.0));
        assert_eq!(velocity_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        assert!((velocity_loss(&a, &b).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        assert!(gradient_matching_loss(&a, &b, 2).unwrap().item().unwrap().abs() < 1e-15);
        assert!(gradient_matching_loss(&a, &b, 3).is_err());
    }

    #[test]
    fn range_check() {
        let ok = Tensor::<f64>::from_fn(&[100], |i| i as f64 / 99.0 - 0.5);
        assert!(check_normalized_range(&ok).is_ok());
        let bad = ok.map(|v| 3.0 * v);
        assert!(check_normalized_range(&bad).is_err());
        let nan = Tensor::<f64>::from_f64(&[2], &[0.0, f64::NAN]).unwrap();
        assert!(check_normalized_range(&nan).is_err());
    }
}
