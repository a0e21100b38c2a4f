//! Frozen semantic encoders: the encoder contract, a small ViT pretrained on
//! scale-and-shift-invariant depth regression, and a ridge linear probe.

use std::path::{Path, PathBuf};

use ppd_tensor::{adamw_step, AdamState, AdamW, Checkpoint, IntoAny, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{align_affine, denormalize, encode, DepthMap, NormStats, DEFAULT_LOG_EPS};
use crate::error::{CoreError, Result};
use crate::fusion::{load_features, SemanticFeatures};
use crate::metrics::absrel;
use crate::nn::{patchify_layout, sincos_2d, unpatchify_layout, Bind, Init, LayerNorm, Linear, Mlp, SelfAttention};
use crate::synth::Sample;

/// Maps an image to a grid of feature tokens. Implementations are
/// deterministic and are never updated by diffusion training.
pub trait SemanticEncoder {
    /// Feature width `D'`.
    fn dim(&self) -> usize;

    /// `image` is row-major `[height, width, channels]`.
    fn encode(&self, image: &[f64], height: usize, width: usize) -> Result<SemanticFeatures>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch: usize,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_channels: usize,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: 8,
            blocks: 4,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            image_channels: 1,
            pretrain_steps: 1500,
            batch_size: 8,
            lr: 5e-4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.blocks == 0 || self.heads == 0 || self.dim % self.heads != 0 || self.dim % 4 != 0 {
            return Err(CoreError::Config(format!(
                "encoder needs positive patch/blocks, dim divisible by heads and by 4 (dim {}, heads {})",
                self.dim, self.heads
            )));
        }
        if self.image_channels == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(CoreError::Config("encoder image_channels, batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct VitBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Pre-norm ViT over non-overlapping patches. Features are the final
/// layer-normed tokens.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore<f32>,
    embed: Linear,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl ToyEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let (d, p) = (cfg.dim, cfg.patch);
        let embed = Linear::new(&mut s, "enc.embed", p * p * cfg.image_channels, d, Init::XavierUniform, true, &mut rng)?;
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks {
            let n = format!("enc.block{i}");
            blocks.push(VitBlock {
                ln1: LayerNorm::affine(&mut s, &format!("{n}.ln1"), d, 1e-6)?,
                attn: SelfAttention::new(&mut s, &format!("{n}.attn"), d, cfg.heads, &mut rng)?,
                ln2: LayerNorm::affine(&mut s, &format!("{n}.ln2"), d, 1e-6)?,
                mlp: Mlp::new(&mut s, &format!("{n}.mlp"), (d, cfg.mlp_ratio * d, d), Init::XavierUniform, &mut rng)?,
            });
        }
        let norm = LayerNorm::affine(&mut s, "enc.norm", d, 1e-6)?;
        let head = Linear::new(&mut s, "enc.head", d, p * p, Init::XavierUniform, true, &mut rng)?;
        Ok(ToyEncoder { cfg: cfg.clone(), params: s, embed, blocks, norm, head })
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.cfg.patch;
        if height % p != 0 || width % p != 0 {
            return Err(CoreError::Config(format!("{height}x{width} image is not divisible by encoder patch {p}")));
        }
        Ok((height / p, width / p))
    }

    /// `[B, T', D']` features for `[B, H, W, C]` images.
    fn tokens<'t>(&self, p: &Bind<'_, 't, f32>, images: &Var<'t, f32>) -> Result<Var<'t, f32>> {
        let (rows, cols) = self.grid(images.shape()[1], images.shape()[2])?;
        let mut x = self.embed.forward(p, &patchify_layout(images, self.cfg.patch)?)?;
        x = x.add(&p.constant(sincos_2d(rows, cols, self.cfg.dim)?))?;
        for b in &self.blocks {
            x = x.add(&b.attn.forward(p, &b.ln1.forward(p, &x)?)?)?;
            x = x.add(&b.mlp.forward(p, &b.ln2.forward(p, &x)?)?)?;
        }
        self.norm.forward(p, &x)
    }

    /// Pretext depth prediction `[B, H, W]` from the features.
    fn predict_depth<'t>(&self, p: &Bind<'_, 't, f32>, feats: &Var<'t, f32>, rows: usize, cols: usize) -> Result<Var<'t, f32>> {
        let b = feats.shape()[0];
        let out = self.head.forward(p, feats)?;
        let img = unpatchify_layout(&out, rows, cols, self.cfg.patch, 1)?;
        Ok(img.reshape(&[b, rows * self.cfg.patch, cols * self.cfg.patch])?)
    }

    pub fn encode_batch(&self, images: &[&[f64]], height: usize, width: usize) -> Result<Vec<SemanticFeatures>> {
        let (rows, cols) = self.grid(height, width)?;
        let c = self.cfg.image_channels;
        let mut data = Vec::with_capacity(images.len() * height * width * c);
        for img in images {
            if img.len() != height * width * c {
                return Err(CoreError::contract("encode", format!("image has {} values, expected {}", img.len(), height * width * c)));
            }
            data.extend(img.iter().map(|&v| v as f32));
        }
        let tape = Tape::no_grad();
        let p = Bind::new(&self.params, &tape);
        let x = tape.constant(Tensor::new(&[images.len(), height, width, c], data)?);
        let feats = self.tokens(&p, &x)?.into_value();
        let per = rows * cols * self.cfg.dim;
        feats
            .data()
            .chunks(per)
            .map(|chunk| SemanticFeatures::new(Tensor::new(&[rows * cols, self.cfg.dim], chunk.to_vec())?, rows, cols))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        for (_, p) in self.params.iter() {
            ck.push(p.name.clone(), p.value.clone().into_any());
        }
        ck.save(path)?;
        let cfg_path = config_path(path);
        let json = serde_json::to_string_pretty(&self.cfg).expect("config serializes");
        std::fs::write(&cfg_path, json).map_err(|e| CoreError::io(&cfg_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| CoreError::io(&cfg_path, e))?;
        let cfg: EncoderConfig = serde_json::from_str(&text).map_err(|e| CoreError::format(&cfg_path, e.to_string()))?;
        let mut enc = ToyEncoder::new(&cfg)?;
        let ck = Checkpoint::load(path)?;
        let ids: Vec<_> = enc.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = ck.get(&name).ok_or_else(|| CoreError::format(path, format!("missing tensor `{name}`")))?;
            enc.params.set(id, t.to::<f32>()).map_err(|e| CoreError::format(path, e.to_string()))?;
        }
        Ok(enc)
    }
}

fn config_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl SemanticEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn encode(&self, image: &[f64], height: usize, width: usize) -> Result<SemanticFeatures> {
        Ok(self.encode_batch(&[image], height, width)?.remove(0))
    }
}

/// Features read from a directory of `<id>.ppsf` files, e.g. exported
/// offline from a large pretrained model.
pub struct PrecomputedFeatures {
    pub dir: PathBuf,
    pub dim: usize,
}

impl PrecomputedFeatures {
    pub fn load(&self, id: &str) -> Result<SemanticFeatures> {
        let f = load_features(&self.dir.join(format!("{id}.ppsf")), None)?;
        if f.dim() != self.dim {
            return Err(CoreError::format(&self.dir, format!("features for {id} have width {}, expected {}", f.dim(), self.dim)));
        }
        Ok(f)
    }
}

/// Per-image scale-and-shift-invariant squared error: the residual variance
/// of `target` after the best affine fit of `pred`,
/// `var(g) − cov(p, g)² / (var(p) + ε)`, averaged over the batch.
pub fn ssi_loss<'t>(pred: &Var<'t, f32>, target: &Var<'t, f32>) -> Result<Var<'t, f32>> {
    let b = pred.shape()[0];
    let n: usize = pred.shape()[1..].iter().product();
    let p = pred.reshape(&[b, n])?;
    let g = target.reshape(&[b, n])?;
    let pc = p.sub(&p.mean_axis(1, true)?)?;
    let gc = g.sub(&g.mean_axis(1, true)?)?;
    let cov = pc.mul(&gc)?.mean_axis(1, false)?;
    let var_p = pc.square()?.mean_axis(1, false)?.offset(1e-6)?;
    let var_g = gc.square()?.mean_axis(1, false)?;
    Ok(var_g.sub(&cov.square()?.div(&var_p)?)?.mean_all()?)
}

/// Normalized log-depth target of a sample, as f32 `[H, W]` values.
fn target_of(s: &Sample) -> Result<Vec<f32>> {
    Ok(encode(&s.depth, DEFAULT_LOG_EPS)?.values().iter().map(|&v| v as f32).collect())
}

/// Trains the encoder and its pretext head, returning the per-step losses.
/// The encoder is frozen by convention afterwards: nothing else updates it.
pub fn pretrain(cfg: &EncoderConfig, train: &[Sample]) -> Result<(ToyEncoder, Vec<f64>)> {
    let mut enc = ToyEncoder::new(cfg)?;
    let first = train.first().ok_or(CoreError::Empty("pretrain"))?;
    let (h, w) = (first.height(), first.width());
    let (rows, cols) = enc.grid(h, w)?;
    let targets: Vec<Vec<f32>> = train.iter().map(target_of).collect::<Result<_>>()?;
    let opt = AdamW { lr: cfg.lr, ..AdamW::default() };
    let mut state = AdamState::new(&enc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    for _ in 0..cfg.pretrain_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let b = batch.len();
        let mut img = Vec::with_capacity(b * h * w);
        let mut tgt = Vec::with_capacity(b * h * w);
        for &i in &batch {
            img.extend(train[i].image.iter().map(|&v| v as f32));
            tgt.extend_from_slice(&targets[i]);
        }
        let tape = Tape::new();
        let p = Bind::new(&enc.params, &tape);
        let x = tape.constant(Tensor::new(&[b, h, w, 1], img)?);
        let y = tape.constant(Tensor::new(&[b, h, w], tgt)?);
        let feats = enc.tokens(&p, &x)?;
        let pred = enc.predict_depth(&p, &feats, rows, cols)?;
        let loss = ssi_loss(&pred, &y)?;
        losses.push(loss.item()? as f64);
        let grads = tape.backward(&loss)?;
        drop(p);
        enc.params.accumulate(&grads);
        adamw_step(&mut enc.params, &mut state, &opt);
        enc.params.zero_grad();
    }
    Ok((enc, losses))
}

/// Solves `A x = b` for symmetric positive definite `A` (`n×n`, row-major)
/// and `m` right-hand sides stored as columns of `b` (`n×m`).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(CoreError::Alignment("probe normal equations are not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
    }
    Ok(x)
}

/// Per-token ridge regression from features (plus bias) to the token's
/// `patch × patch` normalized-depth pixels.
pub struct LinearProbe {
    weights: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

fn patch_targets(s: &Sample, patch: usize) -> Result<Vec<Vec<f64>>> {
    let x0 = encode(&s.depth, DEFAULT_LOG_EPS)?;
    let (h, w) = (s.height(), s.width());
    let (rows, cols) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut px = Vec::with_capacity(patch * patch);
            for dy in 0..patch {
                for dx in 0..patch {
                    px.push(x0.get(r * patch + dy, c * patch + dx));
                }
            }
            out.push(px);
        }
    }
    Ok(out)
}

impl LinearProbe {
    pub fn fit(encoder: &ToyEncoder, train: &[Sample], ridge: f64) -> Result<Self> {
        let d = encoder.dim() + 1;
        let k = encoder.cfg.patch * encoder.cfg.patch;
        let mut xtx = vec![0.0; d * d];
        let mut xty = vec![0.0; d * k];
        for s in train {
            let f = encoder.encode(&s.image, s.height(), s.width())?;
            let targets = patch_targets(s, encoder.cfg.patch)?;
            for (tok, y) in f.tokens.data().chunks(d - 1).zip(&targets) {
                let x: Vec<f64> = tok.iter().map(|&v| v as f64).chain(std::iter::once(1.0)).collect();
                for i in 0..d {
                    for j in 0..d {
                        xtx[i * d + j] += x[i] * x[j];
                    }
                    for j in 0..k {
                        xty[i * k + j] += x[i] * y[j];
                    }
                }
            }
        }
        for i in 0..d {
            xtx[i * d + i] += ridge;
        }
        Ok(LinearProbe { weights: cholesky_solve(&xtx, &xty, d, k)?, in_dim: d, out_dim: k })
    }

    /// Normalized-depth prediction `[H, W]` for one sample.
    pub fn predict(&self, encoder: &ToyEncoder, s: &Sample) -> Result<Vec<f64>> {
        let f = encoder.encode(&s.image, s.height(), s.width())?;
        let p = encoder.cfg.patch;
        let w = s.width();
        let mut out = vec![0.0; s.height() * w];
        for (t, tok) in f.tokens.data().chunks(self.in_dim - 1).enumerate() {
            let (r, c) = (t / f.cols, t % f.cols);
            for j in 0..self.out_dim {
                let mut v = self.weights[(self.in_dim - 1) * self.out_dim + j];
                for (i, &x) in tok.iter().enumerate() {
                    v += x as f64 * self.weights[i * self.out_dim + j];
                }
                out[(r * p + j / p) * w + c * p + j % p] = v;
            }
        }
        Ok(out)
    }

    /// Mean AbsRel on `val` after mapping predictions back through each
    /// sample's own normalization statistics and affine alignment.
    pub fn absrel(&self, encoder: &ToyEncoder, val: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in val {
            let stats: NormStats = encode(&s.depth, DEFAULT_LOG_EPS)?.stats().expect("normalized map has stats");
            let pred = DepthMap::normalized(s.height(), s.width(), self.predict(encoder, s)?, vec![true; s.height() * s.width()], stats)?;
            let (aligned, _) = align_affine(&denormalize(&pred, None)?, &s.depth)?;
            total += absrel(&aligned, &s.depth)?;
        }
        Ok(total / val.len().max(1) as f64)
    }
}
