use crate::element::Element;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment buffers, one slot per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element> {
    pub step: u64,
    pub m: Vec<Option<Tensor<E>>>,
    pub v: Vec<Option<Tensor<E>>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &ParamStore<E>) -> Self {
        AdamState { step: 0, m: vec![None; params.len()], v: vec![None; params.len()] }
    }
}

/// One optimizer step over every parameter holding a gradient. Parameters
/// without a gradient are left untouched, decay included.
pub fn adamw_step<E: Element>(params: &mut ParamStore<E>, state: &mut AdamState<E>, cfg: &AdamW) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step_size = E::of(cfg.lr / bc1);
    let inv_sqrt_bc2 = E::of(1.0 / bc2.sqrt());
    let decay = E::of(1.0 - cfg.lr * cfg.weight_decay);
    let (b1, b2) = (E::of(cfg.beta1), E::of(cfg.beta2));
    let (c1, c2) = (E::of(1.0 - cfg.beta1), E::of(1.0 - cfg.beta2));
    let eps = E::of(cfg.eps);
    if state.m.len() < params.len() {
        state.m.resize(params.len(), None);
        state.v.resize(params.len(), None);
    }
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.grad.as_ref() else { continue };
        let shape = p.value.shape().to_vec();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
        let (md, vd) = (m.data_mut(), v.data_mut());
        let pd = p.value.data_mut();
        for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
            *w = *w * decay;
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
            *w = *w - step_size * *mi / denom;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        ps.param_mut(id).grad = Some(Tensor::zeros(&[3]));
        let mut st = AdamState::new(&ps);
        let cfg = AdamW { weight_decay: 0.0, ..AdamW::default() };
        adamw_step(&mut ps, &mut st, &cfg);
        assert_eq!(ps.get(id).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn one_step_on_square_matches_scalar_reference() {
        // f(w) = w², w = 1 → g = 2.
        let cfg = AdamW { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        ps.param_mut(id).grad = Some(Tensor::from_f64(&[1], &[2.0]).unwrap());
        let mut st = AdamState::new(&ps);
        adamw_step(&mut ps, &mut st, &cfg);

        let mut w = 1.0f64;
        let g = 2.0 * w;
        w -= cfg.lr * cfg.weight_decay * w;
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((ps.get(id).data()[0] - w).abs() < 1e-15, "{} vs {w}", ps.get(id).data()[0]);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamW::default().lr, 1e-4);
    }
}
