//! `ppd`: synthetic data, encoder pretraining, flow-matching depth training,
//! sampling, evaluation and point-cloud export.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ppd_core::codec::{relative_depth, DepthMap, NormStats};
use ppd_core::config::RunConfig;
use ppd_core::dit::Ablation;
use ppd_core::encoder::{pretrain, LinearProbe, ToyEncoder};
use ppd_core::fusion::{l2_normalize, SemanticBatch};
use ppd_core::io::{read_pfm, read_pgm16, write_eval_manifest, write_pfm, write_pgm8, write_ply, EvalRow, GrayImage, PfmImage};
use ppd_core::metrics::{evaluate_run, unproject, CameraIntrinsics, MetricsReport};
use ppd_core::synth::{generate, load_dataset, save_dataset, split, write_split_manifest};
use ppd_core::train::{self, Prepared, Trainer};
use ppd_core::CoreError;
use ppd_tensor::Tensor;

/// Marks configuration and usage mistakes, which exit with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "ppd", version, about = "Pixel-space flow-matching depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = settings::load(self.config.as_deref(), &self.overrides)?;
        ppd_tensor::mode::set_strict(cfg.strict);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and write train/val/test manifests.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `data.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the toy semantic encoder and report a linear-probe comparison.
    PretrainEncoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Encoder checkpoint path; defaults to `<data.dir>/encoder.ppdt`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training images used to fit each linear probe.
        #[arg(long, default_value_t = 128)]
        probe_samples: usize,
    },
    /// Train a depth model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Architecture preset: vanilla, sp or sp-cas.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Run directory; defaults to `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `<out>/ckpt.ppdt` when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Sample depth for images with a trained run.
    Infer {
        /// Run directory holding `resolved_config.toml` and `ckpt.ppdt`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampler steps; defaults to the run's `sampler.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Also write an 8-bit inverse-depth visualization per prediction.
        #[arg(long)]
        vis: bool,
        /// Dataset manifest: predictions are mapped to metric depth with each
        /// sample's ground-truth statistics and an eval manifest is written.
        #[arg(long, conflicts_with = "images")]
        manifest: Option<PathBuf>,
        /// 16-bit PGM images.
        images: Vec<PathBuf>,
    },
    /// Score predictions listed in eval manifests.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `manifest.csv` or `name=manifest.csv`; several give a side-by-side table.
        #[arg(long, required = true)]
        manifest: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unproject a depth map to an ASCII PLY point cloud.
    ExportPly {
        #[arg(long)]
        depth: PathBuf,
        /// Conditioning image whose intensity is attached to each vertex.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        fx: Option<f64>,
        #[arg(long)]
        fy: Option<f64>,
        #[arg(long)]
        cx: Option<f64>,
        #[arg(long)]
        cy: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("PPD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        ppd_tensor::mode::init_threads(n);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || e.chain().any(|c| matches!(c.downcast_ref::<CoreError>(), Some(CoreError::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { cfg, out } => cmd_generate(&cfg.load()?, out),
        Command::PretrainEncoder { cfg, out, probe_samples } => cmd_pretrain(&cfg.load()?, out, probe_samples),
        Command::Train { cfg, ablation, out, resume } => {
            let mut c = cfg.load()?;
            if let Some(a) = ablation {
                c.model = a.apply(&c.model);
            }
            if let Some(o) = out {
                c.train.out_dir = o;
            }
            c.validate().map_err(|e| UsageError(e.to_string()))?;
            cmd_train(&c, resume)
        }
        Command::Infer { run, out, seed, steps, vis, manifest, images } => cmd_infer(&run, &out, seed, steps, vis, manifest, &images),
        Command::Eval { cfg, manifest, out } => cmd_eval(&cfg.load()?, &manifest, &out),
        Command::ExportPly { depth, image, fx, fy, cx, cy, out } => cmd_export_ply(&depth, image.as_deref(), [fx, fy, cx, cy], &out),
    }
}

fn cmd_generate(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.data.dir.clone());
    let start = std::time::Instant::now();
    let samples = generate(&cfg.data.scene, cfg.data.count)?;
    let (tr, va, te) = split(&samples, cfg.data.ratios, cfg.seed)?;
    save_dataset(&samples, &dir, "all.csv")?;
    write_split_manifest(&tr, &dir, "train.csv")?;
    write_split_manifest(&va, &dir, "val.csv")?;
    write_split_manifest(&te, &dir, "test.csv")?;
    let mut archived = cfg.clone();
    archived.data.dir = dir.clone();
    settings::archive(&archived, &dir)?;
    println!(
        "generated {} samples ({} train / {} val / {} test) in {} [{:.1}s]",
        samples.len(),
        tr.len(),
        va.len(),
        te.len(),
        dir.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<Vec<ppd_core::synth::Sample>> {
    let path = cfg.data.dir.join(format!("{name}.csv"));
    load_dataset(&path).with_context(|| format!("loading the {name} split (run `ppd generate` first?)"))
}

fn default_encoder_path(cfg: &RunConfig) -> PathBuf {
    cfg.data.dir.join("encoder.ppdt")
}

fn cmd_pretrain(cfg: &RunConfig, out: Option<PathBuf>, probe_samples: usize) -> Result<()> {
    let path = out.unwrap_or_else(|| default_encoder_path(cfg));
    let train = load_split(cfg, "train")?;
    let val = load_split(cfg, "val")?;
    let start = std::time::Instant::now();
    let (enc, losses) = pretrain(&cfg.encoder, &train)?;
    enc.save(&path)?;
    let log: String = std::iter::once("step,loss".to_string())
        .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l:?}", i + 1)))
        .map(|l| l + "\n")
        .collect();
    let log_path = path.with_extension("loss.csv");
    std::fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;

    let probe_set = &train[..probe_samples.clamp(1, train.len())];
    let random = ToyEncoder::new(&cfg.encoder)?;
    let trained_absrel = LinearProbe::fit(&enc, probe_set, 1e-3)?.absrel(&enc, &val)?;
    let random_absrel = LinearProbe::fit(&random, probe_set, 1e-3)?.absrel(&random, &val)?;
    let report = serde_json::json!({
        "final_loss": losses.last(),
        "probe_absrel_pretrained": trained_absrel,
        "probe_absrel_random_init": random_absrel,
    });
    let report_path = path.with_extension("probe.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "encoder saved to {} [{:.1}s]; linear probe AbsRel on val: pretrained {trained_absrel:.4}, random init {random_absrel:.4}",
        path.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_encoder(cfg: &RunConfig) -> Result<Option<ToyEncoder>> {
    if !cfg.model.semantic {
        return Ok(None);
    }
    let path = cfg.train.encoder.clone().unwrap_or_else(|| default_encoder_path(cfg));
    let enc = ToyEncoder::load(&path).with_context(|| format!("loading encoder {} (run `ppd pretrain-encoder` first?)", path.display()))?;
    if enc.cfg.dim != cfg.model.semantic_dim {
        bail!(UsageError(format!("encoder width {} differs from model.semantic_dim {}", enc.cfg.dim, cfg.model.semantic_dim)));
    }
    Ok(Some(enc))
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let out = cfg.train.out_dir.clone();
    let ckpt = out.join("ckpt.ppdt");
    let encoder = load_encoder(cfg)?;
    let mut archived = cfg.clone();
    if cfg.model.semantic {
        archived.train.encoder = Some(cfg.train.encoder.clone().unwrap_or_else(|| default_encoder_path(cfg)));
    }
    settings::archive(&archived, &out)?;
    let train = Prepared::new(load_split(cfg, "train")?, encoder.as_ref())?;
    let val = match load_split(cfg, "val") {
        Ok(v) if !v.is_empty() => Some(Prepared::new(v, encoder.as_ref())?),
        _ => None,
    };
    let mut trainer = if resume && ckpt.exists() { Trainer::load(cfg, &ckpt)? } else { Trainer::new(cfg)? };
    let start = std::time::Instant::now();
    let first = trainer.step();
    let rows = train::run(&mut trainer, &train, val.as_ref(), &out, |row| {
        if let Some(v) = &row.val {
            println!(
                "step {:>6}  velocity {:.5}  grad {:.5}  val: velocity_mse {:.5} absrel {:.4} delta1 {:.4} chamfer_edge {}",
                row.step,
                row.losses.velocity,
                row.losses.gradient,
                v.velocity_mse,
                v.absrel,
                v.delta1,
                v.chamfer_edge.map_or("-".into(), |c| format!("{c:.4}"))
            );
        }
    })?;
    if let Some(v) = rows.iter().rev().find_map(|r| r.val) {
        std::fs::write(out.join("val_metrics.json"), serde_json::to_string_pretty(&v)?)?;
    }
    println!(
        "trained steps {}..{} in {:.1}s; checkpoint {}",
        first,
        trainer.step(),
        start.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_infer(
    run_dir: &Path,
    out: &Path,
    seed: u64,
    steps: Option<usize>,
    vis: bool,
    manifest: Option<PathBuf>,
    images: &[PathBuf],
) -> Result<()> {
    let mut cfg = settings::load(Some(&run_dir.join("resolved_config.toml")), &[])?;
    ppd_tensor::mode::set_strict(cfg.strict);
    if let Some(s) = steps {
        cfg.sampler.steps = s;
    }
    let schedule = cfg.schedule().map_err(|e| UsageError(e.to_string()))?;
    let trainer = Trainer::load(&cfg, &run_dir.join("ckpt.ppdt"))?;
    let encoder = load_encoder(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    if let Some(m) = manifest {
        let data = Prepared::new(load_dataset(&m)?, encoder.as_ref())?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let preds = trainer.predict_metric(&data, &idx, &schedule, seed)?;
        let mut rows = Vec::with_capacity(preds.len());
        let gt_base = m.parent().unwrap_or(Path::new(".")).canonicalize()?;
        let rows_in = ppd_core::io::read_dataset_manifest(&m)?;
        for ((pred, s), row) in preds.iter().zip(&data.samples).zip(&rows_in) {
            let name = format!("{}.pfm", s.id);
            write_depth(&out.join(&name), pred)?;
            if vis {
                write_vis(&out.join(format!("{}.pgm", s.id)), pred)?;
            }
            let k = s.intrinsics;
            rows.push(EvalRow { id: s.id.clone(), pred_path: name.into(), gt_path: gt_base.join(&row.depth_path), fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy });
        }
        write_eval_manifest(&out.join("eval.csv"), &rows)?;
        println!("wrote {} predictions and {}", rows.len(), out.join("eval.csv").display());
        return Ok(());
    }

    if images.is_empty() {
        bail!(UsageError("give image paths or --manifest".into()));
    }
    let mut failures = 0;
    for (i, path) in images.iter().enumerate() {
        let result = (|| -> Result<()> {
            let img = read_pgm16(path)?;
            let tensor = Tensor::new(&[1, img.height, img.width, 1], img.data.iter().map(|&v| v as f32).collect())?;
            let sem = match &encoder {
                Some(e) => Some(SemanticBatch::stack(&[&l2_normalize(&e.encode_batch(&[&img.data], img.height, img.width)?[0])])?),
                None => None,
            };
            let p = trainer.predict_images(&tensor, sem.as_ref(), &[i as u64], &schedule, seed)?.remove(0);
            // no statistics are known for a bare image; only the values matter here
            let stats = NormStats { d_min: 0.0, d_max: cfg.eval.log_span, eps: 0.0 };
            let n = DepthMap::normalized(img.height, img.width, p, vec![true; img.height * img.width], stats)?;
            let rel = relative_depth(&n, cfg.eval.log_span)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pred");
            write_depth(&out.join(format!("{stem}.pfm")), &rel)?;
            if vis {
                write_vis(&out.join(format!("{stem}.pgm")), &rel)?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            eprintln!("error: {}: {e:#}", path.display());
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} of {} images failed", images.len());
    }
    println!("wrote {} predictions to {}", images.len(), out.display());
    Ok(())
}

fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let data = d.values().iter().zip(d.valid()).map(|(&v, &ok)| if ok { v as f32 } else { f32::NAN }).collect();
    Ok(write_pfm(path, &PfmImage { height: d.height(), width: d.width(), data })?)
}

/// Inverse depth scaled to the full 8-bit range; invalid pixels are black.
fn write_vis(path: &Path, d: &DepthMap) -> Result<()> {
    let inv: Vec<Option<f64>> = d.values().iter().zip(d.valid()).map(|(&v, &ok)| (ok && v > 0.0).then(|| 1.0 / v)).collect();
    let lo = inv.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = inv.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = inv.iter().map(|v| v.map_or(0.0, |x| (x - lo) / span)).collect();
    Ok(write_pgm8(path, &GrayImage { height: d.height(), width: d.width(), data })?)
}

fn cmd_eval(cfg: &RunConfig, manifests: &[String], out: &Path) -> Result<()> {
    let named: Vec<(String, PathBuf)> = manifests
        .iter()
        .map(|m| match m.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => (Path::new(m).parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("run").to_string(), PathBuf::from(m)),
        })
        .collect();
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    for (name, path) in &named {
        let report = evaluate_run(path, &cfg.eval.canny)?;
        for m in &report.missing {
            eprintln!("warning: {name}: skipped {}: {}", m.id, m.reason);
        }
        let dir = if named.len() == 1 { out.to_path_buf() } else { out.join(name) };
        report.save(&dir)?;
        reports.push((name.clone(), report));
    }
    if reports.len() > 1 {
        let mut table = String::from("run,absrel,delta1,chamfer_edge,images\n");
        for (name, r) in &reports {
            let a = &r.aggregate;
            table.push_str(&format!("{name},{},{},{},{}\n", a.absrel, a.delta1, a.chamfer_edge.map_or(String::new(), |c| c.to_string()), r.images.len()));
        }
        std::fs::write(out.join("ablation.csv"), &table)?;
        print!("{table}");
    } else {
        let a = &reports[0].1.aggregate;
        println!(
            "{} images: absrel {:.4} delta1 {:.4} chamfer_edge {}",
            reports[0].1.images.len(),
            a.absrel,
            a.delta1,
            a.chamfer_edge.map_or("-".into(), |c| format!("{c:.4}"))
        );
    }
    if reports.iter().all(|(_, r)| r.images.is_empty()) {
        return Err(anyhow!("no prediction/ground-truth pair could be scored"));
    }
    Ok(())
}

fn cmd_export_ply(depth: &Path, image: Option<&Path>, k: [Option<f64>; 4], out: &Path) -> Result<()> {
    let pfm = read_pfm(depth)?;
    let d = DepthMap::metric(pfm.height, pfm.width, pfm.data.iter().map(|&v| v as f64).collect())?;
    let w = pfm.width as f64;
    let intr = CameraIntrinsics::new(
        k[0].unwrap_or(w),
        k[1].or(k[0]).unwrap_or(w),
        k[2].unwrap_or((w - 1.0) / 2.0),
        k[3].unwrap_or((pfm.height as f64 - 1.0) / 2.0),
    )
    .map_err(|e| UsageError(e.to_string()))?;
    let cloud = unproject(&d, &intr);
    let intensity = match image {
        Some(p) => {
            let img = read_pgm16(p)?;
            if (img.height, img.width) != (pfm.height, pfm.width) {
                bail!(UsageError(format!("image {}x{} does not match depth {}x{}", img.height, img.width, pfm.height, pfm.width)));
            }
            Some(img.data.iter().zip(d.valid()).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect::<Vec<f64>>())
        }
        None => None,
    };
    write_ply(out, &cloud, intensity.as_deref())?;
    println!("wrote {} vertices to {}", cloud.len(), out.display());
    Ok(())
}
