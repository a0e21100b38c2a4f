//! Training loop plumbing: batch assembly with precomputed semantics,
//! resumable optimizer state, checkpoints, loss logs, prediction and
//! validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ppd_tensor::{AdamState, AdamW, Checkpoint, IntoAny, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{denormalize, encode, DepthMap, NormStats, DEFAULT_LOG_EPS};
use crate::config::RunConfig;
use crate::dit::{Dit, ModelConfig};
use crate::encoder::ToyEncoder;
use crate::error::{CoreError, Result};
use crate::flow::{flow_loss, integrate, standard_normal, train_step, DitField, FlowBatch, FlowDraw, SamplerSchedule, StepLosses};
use crate::fusion::{l2_normalize, SemanticBatch, SemanticFeatures};
use crate::metrics::{evaluate_pair, CannyParams, MetricsSummary};
use crate::nn::Bind;
use crate::synth::Sample;

/// Images encoded at once when precomputing features.
const ENCODE_CHUNK: usize = 16;
/// Samples per forward pass during prediction.
const PREDICT_CHUNK: usize = 8;

/// A split ready for training: normalized depth targets and, when an
/// encoder is given, its L2-normalized features computed once.
pub struct Prepared {
    pub samples: Vec<Sample>,
    pub x0: Vec<Vec<f32>>,
    pub stats: Vec<NormStats>,
    pub features: Option<Vec<SemanticFeatures>>,
}

impl Prepared {
    pub fn new(samples: Vec<Sample>, encoder: Option<&ToyEncoder>) -> Result<Self> {
        let first = samples.first().ok_or(CoreError::Empty("dataset"))?;
        let (h, w) = (first.height(), first.width());
        let mut x0 = Vec::with_capacity(samples.len());
        let mut stats = Vec::with_capacity(samples.len());
        for s in &samples {
            if (s.height(), s.width()) != (h, w) {
                return Err(CoreError::Config(format!("sample {} is {}x{}, expected {h}x{w}", s.id, s.height(), s.width())));
            }
            let n = encode(&s.depth, DEFAULT_LOG_EPS)?;
            x0.push(n.values().iter().zip(n.valid()).map(|(&v, &ok)| if ok { v as f32 } else { 0.0 }).collect());
            stats.push(n.stats().expect("normalized map carries stats"));
        }
        let features = match encoder {
            None => None,
            Some(enc) => {
                let mut out = Vec::with_capacity(samples.len());
                for chunk in samples.chunks(ENCODE_CHUNK) {
                    let imgs: Vec<&[f64]> = chunk.iter().map(|s| s.image.as_slice()).collect();
                    out.extend(enc.encode_batch(&imgs, h, w)?.iter().map(l2_normalize));
                }
                Some(out)
            }
        };
        Ok(Prepared { samples, x0, stats, features })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.samples[0].height(), self.samples[0].width())
    }

    pub fn images(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let (h, w) = self.extent();
        let data = idx.iter().flat_map(|&i| self.samples[i].image.iter().map(|&v| v as f32)).collect();
        Ok(Tensor::new(&[idx.len(), h, w, 1], data)?)
    }

    pub fn semantics(&self, idx: &[usize]) -> Result<Option<SemanticBatch<f32>>> {
        match &self.features {
            None => Ok(None),
            Some(f) => Ok(Some(SemanticBatch::stack(&idx.iter().map(|&i| &f[i]).collect::<Vec<_>>())?)),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<FlowBatch<f32>> {
        let (h, w) = self.extent();
        let x0 = idx.iter().flat_map(|&i| self.x0[i].iter().copied()).collect();
        Ok(FlowBatch {
            ids: idx.iter().map(|&i| self.samples[i].id.clone()).collect(),
            images: self.images(idx)?,
            x0: Tensor::new(&[idx.len(), h, w, 1], x0)?,
            sem: self.semantics(idx)?,
        })
    }
}

/// Velocity MSE at the sampler's nonzero times with per-image fixed noise,
/// plus relative-depth metrics of 0-to-1 samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValMetrics {
    pub velocity_mse: f64,
    pub absrel: f64,
    pub delta1: f64,
    pub chamfer_edge: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub losses: StepLosses,
    pub val: Option<ValMetrics>,
}

pub const LOSS_LOG_HEADER: &str = "step,velocity_loss,grad_loss,val_velocity_mse,val_absrel,val_delta1,val_chamfer_edge";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{:?},{:?}", self.step, self.losses.velocity, self.losses.gradient);
        match &self.val {
            Some(v) => {
                let ch = v.chamfer_edge.map(|c| format!("{c:?}")).unwrap_or_default();
                let _ = write!(s, ",{:?},{:?},{:?},{ch}", v.velocity_mse, v.absrel, v.delta1);
            }
            None => s.push_str(",,,,"),
        }
        s
    }
}

/// Model, parameters and optimizer state. Everything random in a step is
/// derived from `(seed, step)`, so a run restored from a checkpoint
/// continues exactly as an uninterrupted one would.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Dit,
    pub params: ParamStore<f32>,
    pub state: AdamState<f32>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream reserved for parameter initialization; steps use `1 + step`.
const INIT_STREAM: u64 = 0;

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.model.validate()?;
        cfg.loss.validate()?;
        cfg.optim.validate()?;
        if cfg.train.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        let mut params = ParamStore::new();
        let model = Dit::new(&cfg.model, &mut params, &mut stream_rng(cfg.seed, INIT_STREAM))?;
        let state = AdamState::new(&params);
        Ok(Trainer { cfg: cfg.clone(), model, params, state })
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    /// Sample indices of step `step` (0-based): consecutive slices of
    /// per-epoch permutations seeded by the run seed and epoch number.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let b = self.cfg.train.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for k in 0..b as u64 {
            let pos = step * b as u64 + k;
            let (epoch, offset) = (pos / n as u64, (pos % n as u64) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream_rng(self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15, epoch));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("filled").1[offset]);
        }
        out
    }

    fn check_data(&self, data: &Prepared) -> Result<()> {
        if data.is_empty() {
            return Err(CoreError::Empty("training data"));
        }
        if self.model.fusion.is_some() && data.features.is_none() {
            return Err(CoreError::Config("the model fuses semantics but no encoder features were prepared".into()));
        }
        let (h, w) = data.extent();
        self.model.cfg.check_extent(h, w)
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, data: &Prepared) -> Result<StepLosses> {
        self.check_data(data)?;
        let step = self.state.step;
        let idx = self.batch_indices(data.len(), step);
        let mut batch = data.batch(&idx)?;
        if self.model.fusion.is_none() {
            batch.sem = None;
        }
        let draw = FlowDraw::random(&batch, &mut stream_rng(self.cfg.seed, 1 + step));
        let opt = AdamW { lr: self.cfg.optim.lr_at(step, self.cfg.train.steps), ..self.cfg.optim.adamw() };
        train_step(&self.model, &mut self.params, &mut self.state, &opt, &batch, &draw, &self.cfg.loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.push("step", Tensor::<f64>::scalar(self.state.step as f64).into_any());
        for (id, p) in self.params.iter() {
            ck.push(format!("param/{}", p.name), p.value.clone().into_any());
            if let Some(m) = &self.state.m[id.0] {
                ck.push(format!("adam_m/{}", p.name), m.clone().into_any());
            }
            if let Some(v) = &self.state.v[id.0] {
                ck.push(format!("adam_v/{}", p.name), v.clone().into_any());
            }
        }
        ck.save(path)?;
        let cfg_path = model_config_path(path);
        let json = serde_json::to_string_pretty(&self.model.cfg).expect("config serializes");
        std::fs::write(&cfg_path, json).map_err(|e| CoreError::io(&cfg_path, e))
    }

    /// Restores parameters, optimizer moments and the step counter. The
    /// checkpoint's model config must match `cfg.model`.
    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let saved = load_model_config(path)?;
        if saved != cfg.model {
            return Err(CoreError::Config(format!("checkpoint {} was trained with a different model config", path.display())));
        }
        let mut t = Trainer::new(cfg)?;
        let ck = Checkpoint::load(path)?;
        let step = ck.get("step").ok_or_else(|| CoreError::format(path, "missing `step`"))?.to::<f64>().item()?;
        t.state.step = step as u64;
        let named: Vec<_> = t.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in named {
            let value = ck.get(&format!("param/{name}")).ok_or_else(|| CoreError::format(path, format!("missing parameter `{name}`")))?;
            t.params.set(id, value.to::<f32>()).map_err(|e| CoreError::format(path, e.to_string()))?;
            t.state.m[id.0] = ck.get(&format!("adam_m/{name}")).map(|a| a.to::<f32>());
            t.state.v[id.0] = ck.get(&format!("adam_v/{name}")).map(|a| a.to::<f32>());
        }
        Ok(t)
    }

    /// Normalized-depth predictions `[H·W]` for `idx`, sampled from
    /// per-image noise seeded by `(seed, idx)`.
    pub fn predict(&self, data: &Prepared, idx: &[usize], schedule: &SamplerSchedule, seed: u64) -> Result<Vec<Vec<f64>>> {
        let (h, w) = data.extent();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(PREDICT_CHUNK) {
            let sem = if self.model.fusion.is_some() { data.semantics(chunk)? } else { None };
            let noise: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            out.extend(self.predict_images(&data.images(chunk)?, sem.as_ref(), &noise, schedule, seed)?);
        }
        debug_assert!(out.iter().all(|p| p.len() == h * w));
        Ok(out)
    }

    /// Samples `[B, H, W, C]` images; image `b` starts from noise drawn on
    /// stream `noise[b]` of `seed`, so results do not depend on batching.
    pub fn predict_images(
        &self,
        images: &Tensor<f32>,
        sem: Option<&SemanticBatch<f32>>,
        noise: &[u64],
        schedule: &SamplerSchedule,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let [b, h, w, _] = *images.shape() else {
            return Err(CoreError::contract("predict", format!("images must be [B, H, W, C], got {:?}", images.shape())));
        };
        self.model.cfg.check_extent(h, w)?;
        if noise.len() != b {
            return Err(CoreError::contract("predict", "one noise stream per image is required"));
        }
        if self.model.fusion.is_some() && sem.is_none() {
            return Err(CoreError::Config("the model fuses semantics but no encoder features were given".into()));
        }
        let mut x1 = Vec::with_capacity(b * h * w);
        for &n in noise {
            x1.extend(standard_normal::<f32>(&[h * w], &mut stream_rng(seed, n)).to_vec());
        }
        let x1 = Tensor::new(&[b, h, w, 1], x1)?;
        let field = DitField { model: &self.model, params: &self.params, images, sem };
        let x = integrate(&field, x1, schedule)?;
        Ok(x.data().chunks(h * w).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
    }

    /// Mean velocity MSE over `idx` at the sampler's nonzero times, with
    /// noise fixed per image so that repeated evaluations are comparable.
    pub fn velocity_mse(&self, data: &Prepared, idx: &[usize], schedule: &SamplerSchedule, seed: u64) -> Result<f64> {
        let times: Vec<f64> = schedule.times().iter().copied().filter(|&t| t > 0.0).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in idx.chunks(PREDICT_CHUNK) {
            let mut batch = data.batch(chunk)?;
            if self.model.fusion.is_none() {
                batch.sem = None;
            }
            let per = batch.x0.numel() / chunk.len();
            let mut x1 = Vec::with_capacity(batch.x0.numel());
            for &i in chunk {
                x1.extend(standard_normal::<f32>(&[per], &mut stream_rng(seed, i as u64)).to_vec());
            }
            let x1 = Tensor::new(batch.x0.shape(), x1)?;
            for &t in &times {
                let draw = FlowDraw { x1: x1.clone(), t: vec![t; chunk.len()] };
                let tape = ppd_tensor::Tape::no_grad();
                let p = Bind::new(&self.params, &tape);
                let (_, vel, _) = flow_loss(&self.model, &p, &batch, &draw, &self.cfg.loss)?;
                total += vel.item()? as f64 * chunk.len() as f64;
                count += chunk.len();
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// Predictions mapped to metric depth with each sample's own GT
    /// statistics, ready for affine-aligned scoring.
    pub fn predict_metric(&self, data: &Prepared, idx: &[usize], schedule: &SamplerSchedule, seed: u64) -> Result<Vec<DepthMap>> {
        let (h, w) = data.extent();
        self.predict(data, idx, schedule, seed)?
            .into_iter()
            .zip(idx)
            .map(|(p, &i)| {
                let n = DepthMap::normalized(h, w, p, vec![true; h * w], data.stats[i])?;
                denormalize(&n, None)
            })
            .collect()
    }

    pub fn validate(&self, data: &Prepared, limit: usize, canny: &CannyParams) -> Result<ValMetrics> {
        let n = if limit == 0 { data.len() } else { limit.min(data.len()) };
        let idx: Vec<usize> = (0..n).collect();
        let schedule = SamplerSchedule::uniform(self.cfg.sampler.steps)?;
        let seed = self.cfg.seed ^ 0x7a11_da7e;
        let velocity_mse = self.velocity_mse(data, &idx, &schedule, seed)?;
        let preds = self.predict_metric(data, &idx, &schedule, seed)?;
        let mut images = Vec::with_capacity(n);
        for (pred, &i) in preds.iter().zip(&idx) {
            let s = &data.samples[i];
            images.push(evaluate_pair(&s.id, pred, &s.depth, &s.intrinsics, canny)?);
        }
        let m = MetricsSummary::from_images(&images);
        Ok(ValMetrics { velocity_mse, absrel: m.absrel, delta1: m.delta1, chamfer_edge: m.chamfer_edge })
    }
}

pub fn model_config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn load_model_config(checkpoint: &Path) -> Result<ModelConfig> {
    let p = model_config_path(checkpoint);
    let text = std::fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::format(&p, e.to_string()))
}

/// Writes the diagnostic dump for a non-finite loss next to the run outputs.
pub fn write_nan_dump(out_dir: &Path, err: &CoreError) -> Result<PathBuf> {
    let path = out_dir.join("nan_dump.txt");
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    std::fs::write(&path, format!("{err}\n")).map_err(|e| CoreError::io(&path, e))?;
    Ok(path)
}

/// Runs `trainer` up to `cfg.train.steps`, checkpointing to `out_dir/ckpt`
/// and appending to `out_dir/loss_log.csv`. Rows logged after the starting
/// step of a resumed run replace any stale rows.
pub fn run(trainer: &mut Trainer, train: &Prepared, val: Option<&Prepared>, out_dir: &Path, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
    let cfg = trainer.cfg.clone();
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let log_path = out_dir.join("loss_log.csv");
    let mut log = String::from(LOSS_LOG_HEADER);
    log.push('\n');
    if trainer.step() > 0 {
        if let Ok(old) = std::fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if step <= trainer.step() {
                    log.push_str(line);
                    log.push('\n');
                }
            }
        }
    }
    let mut rows = Vec::new();
    while trainer.step() < cfg.train.steps {
        let losses = match trainer.train_step(train) {
            Ok(l) => l,
            Err(e @ CoreError::NonFinite { .. }) => {
                write_nan_dump(out_dir, &e)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let step = trainer.step();
        let val_due = cfg.train.val_every > 0 && (step % cfg.train.val_every == 0 || step == cfg.train.steps);
        let val = match (val, val_due) {
            (Some(v), true) => Some(trainer.validate(v, cfg.train.val_limit, &cfg.eval.canny)?),
            _ => None,
        };
        let row = LogRow { step, losses, val };
        log.push_str(&row.csv_line());
        log.push('\n');
        on_row(&row);
        rows.push(row);
        if step % cfg.train.checkpoint_every == 0 || step == cfg.train.steps {
            trainer.save(&out_dir.join("ckpt.ppdt"))?;
            std::fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;
        }
    }
    std::fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;
    Ok(rows)
}
