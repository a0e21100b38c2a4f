//! Cascaded diffusion transformer: patchify, adaLN-zero DiT blocks, the
//! coarse-to-fine token expansion and the per-token output head.

use ppd_tensor::{concat, Element, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fusion::{SemanticBatch, SemanticFusion};
use crate::nn::{dims3, patchify_layout, sincos_2d, unpatchify_layout, Bind, Init, Linear, Mlp, SelfAttention};

/// Scale applied to `t ∈ [0, 1]` before the sinusoidal features.
const TIME_SCALE: f64 = 1000.0;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub coarse_patch: usize,
    pub fine_patch: usize,
    /// Hidden-dim multiplier of the cascade transition; 4 gives exactly
    /// 2×2 child tokens of width `hidden_dim`.
    pub expand_factor: usize,
    pub allow_expand_override: bool,
    /// Coarse first half at `coarse_patch`; otherwise every block runs at `fine_patch`.
    pub cascade: bool,
    /// Semantic fusion with features of width `semantic_dim`.
    pub semantic: bool,
    pub semantic_dim: usize,
    /// Fusion happens after this many blocks; defaults to `n_blocks / 2`.
    pub fusion_block_index: Option<usize>,
    /// Noisy depth channel plus conditioning image channels.
    pub in_channels: usize,
    pub time_freq_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 12,
            hidden_dim: 256,
            n_heads: 4,
            mlp_ratio: 4,
            coarse_patch: 8,
            fine_patch: 4,
            expand_factor: 4,
            allow_expand_override: false,
            cascade: true,
            semantic: true,
            semantic_dim: 128,
            fusion_block_index: None,
            in_channels: 2,
            time_freq_dim: 256,
        }
    }
}

/// The three architectures compared in the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Vanilla,
    Sp,
    SpCas,
}

impl Ablation {
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let (semantic, cascade) = match self {
            Ablation::Vanilla => (false, false),
            Ablation::Sp => (true, false),
            Ablation::SpCas => (true, true),
        };
        ModelConfig { semantic, cascade, ..cfg.clone() }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Vanilla => "vanilla",
            Ablation::Sp => "sp",
            Ablation::SpCas => "sp-cas",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vanilla" => Ok(Ablation::Vanilla),
            "sp" => Ok(Ablation::Sp),
            "sp-cas" => Ok(Ablation::SpCas),
            _ => Err(format!("unknown ablation `{s}`; expected vanilla, sp or sp-cas")),
        }
    }
}

impl ModelConfig {
    /// The full-size configuration: 24 blocks of width 1024, patches 16 → 8.
    pub fn paper() -> Self {
        ModelConfig {
            n_blocks: 24,
            hidden_dim: 1024,
            n_heads: 16,
            coarse_patch: 16,
            fine_patch: 8,
            semantic_dim: 1024,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_blocks == 0 || self.n_blocks % 2 != 0 {
            return bad(format!("n_blocks must be even and positive, got {}", self.n_blocks));
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.hidden_dim % 4 != 0 {
            return bad(format!("hidden_dim {} must be divisible by 4 for the 2-D positional encoding", self.hidden_dim));
        }
        if self.fine_patch == 0 || self.coarse_patch != 2 * self.fine_patch {
            return bad(format!("coarse_patch ({}) must be twice fine_patch ({})", self.coarse_patch, self.fine_patch));
        }
        if self.expand_factor != 4 && !self.allow_expand_override {
            return bad(format!("expand_factor {} differs from 4; set allow_expand_override to use it", self.expand_factor));
        }
        if self.expand_factor == 0 || (self.expand_factor * self.hidden_dim) % 4 != 0 {
            return bad(format!("expand_factor * hidden_dim must be a positive multiple of 4"));
        }
        if self.in_channels < 2 {
            return bad(format!("in_channels must cover depth plus image, got {}", self.in_channels));
        }
        if self.mlp_ratio == 0 || self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad("mlp_ratio must be positive and time_freq_dim even".into());
        }
        if self.semantic && self.semantic_dim == 0 {
            return bad("semantic_dim must be positive".into());
        }
        let f = self.fusion_index();
        if f > self.n_blocks || (self.cascade && f < self.n_blocks / 2) {
            return bad(format!("fusion_block_index {f} must lie in the fine stage [{}, {}]", self.n_blocks / 2, self.n_blocks));
        }
        Ok(())
    }

    pub fn fusion_index(&self) -> usize {
        self.fusion_block_index.unwrap_or(self.n_blocks / 2)
    }

    /// Patch size of the first stage.
    pub fn input_patch(&self) -> usize {
        if self.cascade {
            self.coarse_patch
        } else {
            self.fine_patch
        }
    }

    pub fn image_channels(&self) -> usize {
        self.in_channels - 1
    }

    /// Extents must be divisible by the largest patch the model uses.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let p = self.input_patch();
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(CoreError::Config(format!("{h}x{w} input is not divisible by patch size {p}")));
        }
        Ok(())
    }
}

/// Tokens `[B, rows·cols, D]` laid out row-major on a grid of patches.
#[derive(Clone)]
pub struct TokenGrid<'t, E: Element> {
    pub tokens: Var<'t, E>,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl<'t, E: Element> TokenGrid<'t, E> {
    pub fn new(tokens: Var<'t, E>, rows: usize, cols: usize, patch: usize) -> Result<Self> {
        let (_, t, _) = dims3(&tokens)?;
        if t != rows * cols {
            return Err(CoreError::contract("TokenGrid", format!("{t} tokens on a {rows}x{cols} grid")));
        }
        Ok(TokenGrid { tokens, rows, cols, patch })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn with_tokens(&self, tokens: Var<'t, E>) -> Self {
        TokenGrid { tokens, ..self.clone() }
    }
}

/// Sinusoidal features of `t·1000` followed by Linear → SiLU → Linear.
#[derive(Debug, Clone)]
pub struct TimeEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
}

impl TimeEmbedder {
    fn new<E: Element>(store: &mut ParamStore<E>, freq_dim: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(TimeEmbedder {
            fc1: Linear::new(store, "time.fc1", freq_dim, dim, Init::Normal(0.02), true, rng)?,
            fc2: Linear::new(store, "time.fc2", dim, dim, Init::Normal(0.02), true, rng)?,
            freq_dim,
        })
    }

    /// `[B, freq_dim]`: cosines then sines at log-spaced frequencies.
    pub fn features<E: Element>(&self, t: &[f64]) -> Result<Tensor<E>> {
        let half = self.freq_dim / 2;
        let mut data = Vec::with_capacity(t.len() * self.freq_dim);
        for &ti in t {
            if !(0.0..=1.0).contains(&ti) {
                return Err(CoreError::contract("time_embedding", format!("t = {ti} outside [0, 1]")));
            }
            let args: Vec<f64> = (0..half)
                .map(|i| ti * TIME_SCALE * (-(10000f64.ln()) * i as f64 / half as f64).exp())
                .collect();
            data.extend(args.iter().map(|a| E::of(a.cos())));
            data.extend(args.iter().map(|a| E::of(a.sin())));
        }
        Ok(Tensor::new(&[t.len(), self.freq_dim], data)?)
    }

    pub fn forward<'t, E: Element>(&self, p: &Bind<'_, 't, E>, t: &[f64]) -> Result<Var<'t, E>> {
        let f = p.constant(self.features(t)?);
        self.fc2.forward(p, &self.fc1.forward(p, &f)?.silu()?)
    }
}

/// Pre-norm transformer block with adaLN-zero timestep conditioning.
#[derive(Debug, Clone)]
pub struct DitBlock {
    pub ada: Linear,
    pub attn: SelfAttention,
    pub mlp: Mlp,
    pub dim: usize,
}

/// `x · (1 + scale) + shift` with per-sample `[B, 1, D]` modulation.
fn modulate<'t, E: Element>(x: &Var<'t, E>, shift: &Var<'t, E>, scale: &Var<'t, E>) -> Result<Var<'t, E>> {
    Ok(x.mul(&scale.offset(1.0)?)?.add(shift)?)
}

impl DitBlock {
    fn new<E: Element>(store: &mut ParamStore<E>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(DitBlock {
            ada: Linear::new(store, &format!("{name}.ada"), d, 6 * d, Init::Zeros, true, rng)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, cfg.n_heads, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), (d, cfg.mlp_ratio * d, d), Init::XavierUniform, rng)?,
            dim: d,
        })
    }

    /// `c_act` is `SiLU(time embedding)`, shape `[B, D]`.
    pub fn forward<'t, E: Element>(
        &self,
        p: &Bind<'_, 't, E>,
        z: &TokenGrid<'t, E>,
        c_act: &Var<'t, E>,
    ) -> Result<TokenGrid<'t, E>> {
        let b = c_act.shape()[0];
        let m = self.ada.forward(p, c_act)?.reshape(&[b, 1, 6 * self.dim])?.chunk(6, 2)?;
        let x = &z.tokens;
        let h = modulate(&x.layer_norm(None, None, NORM_EPS)?, &m[0], &m[1])?;
        let x = x.add(&self.attn.forward(p, &h)?.mul(&m[2])?)?;
        let h = modulate(&x.layer_norm(None, None, NORM_EPS)?, &m[3], &m[4])?;
        let x = x.add(&self.mlp.forward(p, &h)?.mul(&m[5])?)?;
        Ok(z.with_tokens(x))
    }
}

/// Per-token linear map `D → e·D`, then each token becomes a 2×2 block of
/// child tokens: the expanded vector splits as (top-left, top-right,
/// bottom-left, bottom-right) × `e·D/4` channels. With `e ≠ 4` a projection
/// maps children back to width `D`.
#[derive(Debug, Clone)]
pub struct CascadeTransition {
    pub expand: Linear,
    pub project: Option<Linear>,
}

impl CascadeTransition {
    fn new<E: Element>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.hidden_dim;
        let wide = cfg.expand_factor * d;
        let expand = Linear::new(store, "cascade.expand", d, wide, Init::XavierUniform, true, rng)?;
        let project = if wide / 4 != d {
            Some(Linear::new(store, "cascade.project", wide / 4, d, Init::XavierUniform, true, rng)?)
        } else {
            None
        };
        Ok(CascadeTransition { expand, project })
    }

    pub fn forward<'t, E: Element>(&self, p: &Bind<'_, 't, E>, z: &TokenGrid<'t, E>) -> Result<TokenGrid<'t, E>> {
        let (b, _, _) = dims3(&z.tokens)?;
        let (r, c) = (z.rows, z.cols);
        let wide = self.expand.out_dim;
        let child = wide / 4;
        let tokens = self
            .expand
            .forward(p, &z.tokens)?
            .reshape(&[b, r, c, 2, 2, child])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, 4 * r * c, child])?;
        let tokens = match &self.project {
            Some(proj) => proj.forward(p, &tokens)?,
            None => tokens,
        };
        TokenGrid::new(tokens, 2 * r, 2 * c, z.patch / 2)
    }
}

/// Final adaLN-modulated norm and a zero-initialized per-token projection to
/// `p·p` pixels.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub ada: Linear,
    pub linear: Linear,
    pub dim: usize,
}

impl OutputHead {
    fn new<E: Element>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.hidden_dim;
        let p = cfg.fine_patch;
        Ok(OutputHead {
            ada: Linear::new(store, "head.ada", d, 2 * d, Init::Zeros, true, rng)?,
            linear: Linear::new(store, "head.linear", d, p * p, Init::Zeros, true, rng)?,
            dim: d,
        })
    }

    /// `[B, H, W, 1]` mosaic of the per-token patches.
    pub fn forward<'t, E: Element>(&self, p: &Bind<'_, 't, E>, z: &TokenGrid<'t, E>, c_act: &Var<'t, E>) -> Result<Var<'t, E>> {
        let b = c_act.shape()[0];
        let m = self.ada.forward(p, c_act)?.reshape(&[b, 1, 2 * self.dim])?.chunk(2, 2)?;
        let h = modulate(&z.tokens.layer_norm(None, None, NORM_EPS)?, &m[0], &m[1])?;
        let out = self.linear.forward(p, &h)?;
        unpatchify_layout(&out, z.rows, z.cols, z.patch, 1)
    }
}

#[derive(Debug, Clone)]
pub struct Dit {
    pub cfg: ModelConfig,
    pub embed: Linear,
    pub time: TimeEmbedder,
    pub blocks: Vec<DitBlock>,
    pub transition: Option<CascadeTransition>,
    pub fusion: Option<SemanticFusion>,
    pub head: OutputHead,
}

impl Dit {
    /// Registers all parameters in `store` (which should be empty so that
    /// parameter names are unique) and returns the model layout.
    pub fn new<E: Element>(cfg: &ModelConfig, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.input_patch();
        let embed = Linear::new(store, "embed", p * p * cfg.in_channels, cfg.hidden_dim, Init::XavierUniform, true, rng)?;
        let time = TimeEmbedder::new(store, cfg.time_freq_dim, cfg.hidden_dim, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            blocks.push(DitBlock::new(store, &format!("block{i}"), cfg, rng)?);
        }
        let transition = if cfg.cascade { Some(CascadeTransition::new(store, cfg, rng)?) } else { None };
        let fusion = if cfg.semantic {
            Some(SemanticFusion::new(store, cfg.hidden_dim, cfg.semantic_dim, rng)?)
        } else {
            None
        };
        let head = OutputHead::new(store, cfg, rng)?;
        Ok(Dit { cfg: cfg.clone(), embed, time, blocks, transition, fusion, head })
    }

    /// Linear patch embedding of `a = x_t ⊕ c` (`[B, H, W, C]`) plus the
    /// fixed 2-D positional encoding.
    pub fn patchify<'t, E: Element>(&self, p: &Bind<'_, 't, E>, a: &Var<'t, E>) -> Result<TokenGrid<'t, E>> {
        let patch = self.cfg.input_patch();
        let (h, w) = (a.shape()[1], a.shape()[2]);
        self.cfg.check_extent(h, w)?;
        let (rows, cols) = (h / patch, w / patch);
        let tokens = self.embed.forward(p, &patchify_layout(a, patch)?)?;
        let tokens = tokens.add(&p.constant(sincos_2d(rows, cols, self.cfg.hidden_dim)?))?;
        TokenGrid::new(tokens, rows, cols, patch)
    }

    /// Velocity prediction `[B, H, W, 1]` for noisy depth `x_t` `[B, H, W, 1]`,
    /// conditioning image `cond` `[B, H, W, C−1]` and per-sample times `t`.
    pub fn forward<'t, E: Element>(
        &self,
        p: &Bind<'_, 't, E>,
        x_t: &Var<'t, E>,
        cond: &Var<'t, E>,
        t: &[f64],
        sem: Option<&SemanticBatch<E>>,
    ) -> Result<Var<'t, E>> {
        let [b, h, w, one] = *x_t.shape() else {
            return Err(CoreError::contract("forward", format!("x_t must be [B, H, W, 1], got {:?}", x_t.shape())));
        };
        if one != 1 || cond.shape() != [b, h, w, self.cfg.image_channels()] || t.len() != b {
            return Err(CoreError::Config(format!(
                "x_t {:?}, image {:?} and {} times do not agree (image needs {} channels)",
                x_t.shape(),
                cond.shape(),
                t.len(),
                self.cfg.image_channels()
            )));
        }
        if sem.is_some() && self.fusion.is_none() {
            return Err(CoreError::contract("forward", "semantic features given to a model without fusion"));
        }
        let a = concat(&[x_t, cond], 3)?;
        let mut z = self.patchify(p, &a)?;
        let c_act = self.time.forward(p, t)?.silu()?;
        let half = self.cfg.n_blocks / 2;
        for (i, block) in self.blocks.iter().enumerate() {
            if i == half {
                if let Some(tr) = &self.transition {
                    z = tr.forward(p, &z)?;
                    let pos = sincos_2d(z.rows, z.cols, self.cfg.hidden_dim)?;
                    z = z.with_tokens(z.tokens.add(&p.constant(pos))?);
                }
            }
            if i == self.cfg.fusion_index() {
                z = self.fuse(p, z, sem)?;
            }
            z = block.forward(p, &z, &c_act)?;
        }
        if self.cfg.fusion_index() == self.blocks.len() {
            z = self.fuse(p, z, sem)?;
        }
        self.head.forward(p, &z, &c_act)
    }

    fn fuse<'t, E: Element>(
        &self,
        p: &Bind<'_, 't, E>,
        z: TokenGrid<'t, E>,
        sem: Option<&SemanticBatch<E>>,
    ) -> Result<TokenGrid<'t, E>> {
        match (&self.fusion, sem) {
            (Some(f), Some(s)) => f.align_and_fuse(p, &z, s),
            _ => Ok(z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppd_tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { n_blocks: 2, hidden_dim: 16, n_heads: 2, semantic_dim: 8, time_freq_dim: 8, ..Default::default() }
    }

    #[test]
    fn config_rules() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        assert!(ModelConfig { n_blocks: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { coarse_patch: 12, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { expand_factor: 2, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { expand_factor: 2, allow_expand_override: true, ..Default::default() }.validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn token_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = ModelConfig { coarse_patch: 16, fine_patch: 8, ..small() };
        let m = Dit::new(&cfg, &mut store, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let p = Bind::new(&store, &tape);
        let a = tape.constant(Tensor::zeros(&[1, 64, 64, 2]));
        let z = m.patchify(&p, &a).unwrap();
        assert_eq!((z.rows, z.cols, z.len()), (4, 4, 16));
        let f = m.transition.as_ref().unwrap().forward(&p, &z).unwrap();
        assert_eq!((f.rows, f.cols, f.len(), f.patch), (8, 8, 64, 8));
    }

    #[test]
    fn zero_map_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let m = Dit::new(&small(), &mut store, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let p = Bind::new(&store, &tape);
        let x = tape.constant(Tensor::randn(&[2, 16, 16, 1], &mut rng));
        let c = tape.constant(Tensor::uniform(&[2, 16, 16, 1], 0.0, 1.0, &mut rng));
        let y = m.forward(&p, &x, &c, &[0.3, 0.9], None).unwrap();
        assert_eq!(y.shape(), &[2, 16, 16, 1]);
        assert_eq!(y.value().max_abs(), 0.0);
    }

    #[test]
    fn extent_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let m = Dit::new(&small(), &mut store, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let p = Bind::new(&store, &tape);
        let x = tape.constant(Tensor::zeros(&[1, 12, 16, 1]));
        let err = m.forward(&p, &x, &x, &[0.5], None).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)), "{err}");
    }
}
