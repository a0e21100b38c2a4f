//! Parameter-backed building blocks shared by the diffusion model and the
//! toy encoder.

use ppd_tensor::{softmax_attention, Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};

/// Binds parameters of one store onto one tape.
pub struct Bind<'a, 't, E: Element> {
    pub params: &'a ParamStore<E>,
    pub tape: &'t Tape<E>,
}

impl<'a, 't, E: Element> Bind<'a, 't, E> {
    pub fn new(params: &'a ParamStore<E>, tape: &'t Tape<E>) -> Self {
        Bind { params, tape }
    }

    pub fn get(&self, id: ParamId) -> Var<'t, E> {
        self.params.bind(self.tape, id)
    }

    pub fn constant(&self, t: Tensor<E>) -> Var<'t, E> {
        self.tape.constant(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    XavierUniform,
    Normal(f64),
}

pub fn init_tensor<E: Element>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<E> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::XavierUniform => {
            let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::uniform(shape, -a, a, rng)
        }
        Init::Normal(std) => {
            let n = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| E::of(n.sample(rng)))
        }
    }
}

/// `y = x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_tensor(&[in_dim, out_dim], init, rng))?;
        let b = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward<'t, E: Element>(&self, p: &Bind<'_, 't, E>, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let y = x.matmul(&p.get(self.w))?;
        Ok(match self.b {
            Some(b) => y.add(&p.get(b))?,
            None => y,
        })
    }
}

/// Layer norm over the last axis with optional learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn plain(eps: f64) -> Self {
        LayerNorm { gamma: None, beta: None, eps }
    }

    pub fn affine<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma: Some(gamma), beta: Some(beta), eps })
    }

    pub fn forward<'t, E: Element>(&self, p: &Bind<'_, 't, E>, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let g = self.gamma.map(|id| p.get(id));
        let b = self.beta.map(|id| p.get(id));
        Ok(x.layer_norm(g.as_ref(), b.as_ref(), self.eps)?)
    }
}

/// Multi-head self-attention with fused QKV projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, Init::XavierUniform, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, Init::XavierUniform, true, rng)?,
            heads,
        })
    }

    /// `x`: `[B, T, D]`.
    pub fn forward<'t, E: Element>(&self, p: &Bind<'_, 't, E>, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let (b, t, d) = dims3(x)?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(p, x)?
            .reshape(&[b, t, 3, self.heads, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let parts = qkv.chunk(3, 0)?;
        let shape = [b, self.heads, t, dh];
        let (q, k, v) = (parts[0].reshape(&shape)?, parts[1].reshape(&shape)?, parts[2].reshape(&shape)?);
        let o = softmax_attention(&q, &k, &v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
        self.proj.forward(p, &o)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dims: (usize, usize, usize),
        out_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, Init::XavierUniform, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, out_init, true, rng)?,
        })
    }

    pub fn forward<'t, E: Element>(&self, p: &Bind<'_, 't, E>, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu()?)
    }
}

pub fn dims3<E: Element>(x: &Var<'_, E>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(CoreError::contract("tokens", format!("expected [B, T, D], got {s:?}"))),
    }
}

/// Fixed 2-D sine-cosine table `[rows·cols, dim]`: the first half of each
/// vector encodes the row index, the second half the column index.
pub fn sincos_2d<E: Element>(rows: usize, cols: usize, dim: usize) -> Result<Tensor<E>> {
    if dim % 4 != 0 {
        return Err(CoreError::Config(format!("positional encoding needs dim divisible by 4, got {dim}")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| E::of((pos * w).sin())));
                data.extend(omega.iter().map(|w| E::of((pos * w).cos())));
            }
        }
    }
    Ok(Tensor::new(&[rows * cols, dim], data)?)
}

/// `[B, H, W, C]` image to `[B, (H/p)(W/p), p·p·C]` patch rows, row-major over
/// patches and, inside a patch, over `(dy, dx, c)`.
pub fn patchify_layout<'t, E: Element>(x: &Var<'t, E>, p: usize) -> Result<Var<'t, E>> {
    let [b, h, w, c] = *x.shape() else {
        return Err(CoreError::contract("patchify", format!("expected [B, H, W, C], got {:?}", x.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(CoreError::Config(format!("{h}x{w} input is not divisible by patch size {p}")));
    }
    let (rows, cols) = (h / p, w / p);
    Ok(x
        .reshape(&[b, rows, p, cols, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, rows * cols, p * p * c])?)
}

/// Inverse of [`patchify_layout`].
pub fn unpatchify_layout<'t, E: Element>(x: &Var<'t, E>, rows: usize, cols: usize, p: usize, c: usize) -> Result<Var<'t, E>> {
    let (b, t, k) = dims3(x)?;
    if t != rows * cols || k != p * p * c {
        return Err(CoreError::contract("unpatchify", format!("{:?} does not match {rows}x{cols} grid of {p}x{p}x{c}", x.shape())));
    }
    Ok(x
        .reshape(&[b, rows, cols, p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, rows * p, cols * p, c])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn(&[2, 8, 12, 2], &mut rng);
        let tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let p = patchify_layout(&v, 4).unwrap();
        assert_eq!(p.shape(), &[2, 6, 32]);
        let back = unpatchify_layout(&p, 2, 3, 4, 2).unwrap();
        assert!(back.value().bit_eq(&x));
    }

    #[test]
    fn patch_tokens_hold_their_pixels() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let tape = Tape::no_grad();
        let p = patchify_layout(&tape.constant(x), 2).unwrap();
        assert_eq!(&p.value().data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn sincos_rows_and_cols_differ() {
        let t = sincos_2d::<f64>(2, 3, 8).unwrap();
        assert_eq!(t.shape(), &[6, 8]);
        // token (0, 0): sin 0 = 0, cos 0 = 1 in both halves
        assert_eq!(&t.data()[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(sincos_2d::<f64>(2, 2, 6).is_err());
    }
}
