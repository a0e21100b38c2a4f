//! Semantic prompting: per-token L2 normalization of encoder features,
//! bilinear alignment to the DiT token grid and MLP fusion.

use std::path::Path;

use ppd_tensor::{bilinear_resize, concat, Element, ParamStore, Tensor};
use rand::Rng;

use crate::dit::TokenGrid;
use crate::error::{CoreError, Result};
use crate::io::{read_bytes, write_bytes};
use crate::nn::{dims3, Bind, Init, Linear, Mlp};

/// Floor on the token norm in the L2 denominator.
pub const L2_EPS: f64 = 1e-8;

/// Encoder output tokens `[rows·cols, dim]` on their own grid.
#[derive(Debug, Clone)]
pub struct SemanticFeatures {
    pub tokens: Tensor<f32>,
    pub rows: usize,
    pub cols: usize,
    pub normalized: bool,
}

impl SemanticFeatures {
    pub fn new(tokens: Tensor<f32>, rows: usize, cols: usize) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != rows * cols {
            return Err(CoreError::contract(
                "SemanticFeatures",
                format!("tokens {:?} do not fit a {rows}x{cols} grid", tokens.shape()),
            ));
        }
        Ok(SemanticFeatures { tokens, rows, cols, normalized: false })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn scaled(&self, k: f32) -> Self {
        SemanticFeatures { tokens: self.tokens.map(|v| v * k), normalized: false, ..self.clone() }
    }
}

/// Divides every token by `max(‖e‖₂, 1e-8)`. The norm is accumulated in
/// double precision. Using a floor rather than an additive epsilon keeps the
/// result exactly invariant to positive rescaling of `e` whenever the norm
/// exceeds the floor.
pub fn l2_normalize(e: &SemanticFeatures) -> SemanticFeatures {
    let d = e.dim();
    let mut data = e.tokens.to_vec();
    for tok in data.chunks_mut(d) {
        let norm = tok.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt().max(L2_EPS);
        for v in tok.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    SemanticFeatures {
        tokens: Tensor::new(e.tokens.shape(), data).expect("same shape"),
        normalized: true,
        ..e.clone()
    }
}

/// A batch of feature grids, `[B, rows, cols, dim]`, in the model's precision.
#[derive(Debug, Clone)]
pub struct SemanticBatch<E: Element> {
    pub grid: Tensor<E>,
    pub normalized: bool,
}

impl<E: Element> SemanticBatch<E> {
    pub fn stack(items: &[&SemanticFeatures]) -> Result<Self> {
        let first = items.first().ok_or(CoreError::Empty("SemanticBatch"))?;
        let (r, c, d) = (first.rows, first.cols, first.dim());
        let mut data = Vec::with_capacity(items.len() * r * c * d);
        for f in items {
            if (f.rows, f.cols, f.dim()) != (r, c, d) {
                return Err(CoreError::contract("SemanticBatch", "feature grids differ within a batch"));
            }
            data.extend(f.tokens.data().iter().map(|&v| E::of(v as f64)));
        }
        Ok(SemanticBatch {
            grid: Tensor::new(&[items.len(), r, c, d], data)?,
            normalized: items.iter().all(|f| f.normalized),
        })
    }
}

/// `z' = h_φ(z ⊕ B(ê))` with `h_φ(u) = S·u + MLP(u)`. `S` starts as `[I | 0]`
/// and the MLP's output layer starts at zero, so fusion is the identity on
/// `z` at initialization.
#[derive(Debug, Clone)]
pub struct SemanticFusion {
    pub skip: Linear,
    pub mlp: Mlp,
    pub dim: usize,
    pub sem_dim: usize,
}

impl SemanticFusion {
    pub fn new<E: Element>(store: &mut ParamStore<E>, dim: usize, sem_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let skip = Linear::new(store, "fusion.skip", dim + sem_dim, dim, Init::Zeros, false, rng)?;
        let eye = Tensor::from_fn(&[dim + sem_dim, dim], |i| if i / dim == i % dim { E::one() } else { E::zero() });
        store.set(skip.w, eye)?;
        let mlp = Mlp::new(store, "fusion.mlp", (dim + sem_dim, dim, dim), Init::Zeros, rng)?;
        Ok(SemanticFusion { skip, mlp, dim, sem_dim })
    }

    pub fn align_and_fuse<'t, E: Element>(
        &self,
        p: &Bind<'_, 't, E>,
        z: &TokenGrid<'t, E>,
        sem: &SemanticBatch<E>,
    ) -> Result<TokenGrid<'t, E>> {
        if !sem.normalized {
            return Err(CoreError::contract("align_and_fuse", "semantic features must be L2-normalized first"));
        }
        let (b, t, _) = dims3(&z.tokens)?;
        let [sb, _, _, sd] = *sem.grid.shape() else {
            return Err(CoreError::contract("align_and_fuse", "feature grid must be [B, rows, cols, dim]"));
        };
        if sb != b || sd != self.sem_dim {
            return Err(CoreError::contract(
                "align_and_fuse",
                format!("features {:?} for {b} samples of width {}", sem.grid.shape(), self.sem_dim),
            ));
        }
        let e = p.constant(sem.grid.clone());
        let aligned = bilinear_resize(&e, z.rows, z.cols)?.reshape(&[b, t, sd])?;
        let u = concat(&[&z.tokens, &aligned], 2)?;
        let out = self.skip.forward(p, &u)?.add(&self.mlp.forward(p, &u)?)?;
        TokenGrid::new(out, z.rows, z.cols, z.patch)
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"PPSF";
const FEATURE_VERSION: u32 = 1;

/// Little-endian: magic `PPSF`, version, rows, cols, dim (u32 each), then
/// `rows·cols·dim` f32 values row-major.
pub fn save_features(path: &Path, f: &SemanticFeatures) -> Result<()> {
    let mut out = Vec::with_capacity(20 + f.tokens.numel() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, f.rows as u32, f.cols as u32, f.dim() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in f.tokens.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &out)
}

/// Loads a feature file; the result is not normalized. When `expect` gives
/// a token count and dim (e.g. from a manifest), mismatches are errors.
pub fn load_features(path: &Path, expect: Option<(usize, usize)>) -> Result<SemanticFeatures> {
    let bytes = read_bytes(path)?;
    let fail = |m: String| CoreError::format(path, m);
    if bytes.len() < 20 {
        return Err(fail(format!("{} bytes is shorter than the 20-byte header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fail("bad magic, expected PPSF".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, rows, cols, dim) = (word(0) as u32, word(1), word(2), word(3));
    if version != FEATURE_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    if rows == 0 || cols == 0 || dim == 0 {
        return Err(fail("zero extent".into()));
    }
    if let Some((tokens, d)) = expect {
        if rows * cols != tokens || dim != d {
            return Err(fail(format!("file holds {}x{dim} features, expected {tokens}x{d}", rows * cols)));
        }
    }
    let body = &bytes[20..];
    let n = rows * cols * dim;
    if body.len() != n * 4 {
        return Err(fail(format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    SemanticFeatures::new(Tensor::new(&[rows * cols, dim], data)?, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let e = SemanticFeatures::new(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(), 1, 1).unwrap();
        let n = l2_normalize(&e);
        assert!(n.normalized);
        assert!((n.tokens.data()[0] - 0.6).abs() < 1e-7 && (n.tokens.data()[1] - 0.8).abs() < 1e-7);
        let again = l2_normalize(&n);
        assert!(again.tokens.max_abs_diff(&n.tokens) < 1e-7);
    }

    #[test]
    fn zero_token_stays_finite() {
        let e = SemanticFeatures::new(Tensor::zeros(&[2, 3]), 1, 2).unwrap();
        assert!(l2_normalize(&e).tokens.all_finite());
    }

    #[test]
    fn feature_file_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppsf");
        let f = SemanticFeatures::new(Tensor::from_fn(&[64, 128], |i| (i as f32).sin()), 8, 8).unwrap();
        save_features(&path, &f).unwrap();
        let back = load_features(&path, Some((64, 128))).unwrap();
        assert!(back.tokens.bit_eq(&f.tokens) && (back.rows, back.cols) == (8, 8) && !back.normalized);
        assert!(load_features(&path, Some((64, 64))).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_features(&path, None), Err(CoreError::Format { .. })));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(load_features(&path, None), Err(CoreError::Format { .. })));
    }
}
