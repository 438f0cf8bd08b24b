//! Command-line driver. Exit code 0 on success, 1 on usage errors and 2 on
//! data or validation errors, which are printed as `ERR_<KIND>: message`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::kpn::{apply_lp_kpn, KernelTensor};
use crate::lens::initial_scale;
use crate::metrics::evaluate_planes;
use crate::nn::{predict, train_toy, LpkpnParams, ModelConfig};
use crate::pyramid::decompose;
use crate::registration::{register_any_p, AffineTransform};
use crate::synth::{registration_suite, sr_training_pairs};

#[derive(Parser, Debug)]
#[command(name = "lpkpn", version, about = "Zoom-pair registration, Laplacian pyramid kernel prediction and quality metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML run configuration; individual flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align a short-focal LR image to a long-focal HR image.
    Register {
        lr: PathBuf,
        hr: PathBuf,
        /// Initial zoom of the HR frame relative to the LR frame.
        #[arg(long, conflicts_with_all = ["focal_hr", "focal_lr"])]
        scale_init: Option<f64>,
        /// Focal length of the HR capture; with --focal-lr gives the initial zoom.
        #[arg(long, requires = "focal_lr")]
        focal_hr: Option<f64>,
        #[arg(long, requires = "focal_hr")]
        focal_lr: Option<f64>,
        /// Norm exponent of the alignment objective.
        #[arg(long)]
        p: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write the three Laplacian pyramid levels as tensor containers.
    Pyramid {
        image: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Filter an image's pyramid with three kernel tensors and reconstruct.
    Apply {
        image: PathBuf,
        t0: PathBuf,
        t1: PathBuf,
        t2: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the kernel-prediction network on `*_lr.png` / `*_hr.png` pairs.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run a trained network on one image.
    Predict {
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// PSNR and SSIM of a prediction against ground truth, on Y.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Generate synthetic pairs with a truth sidecar.
    Synth {
        /// TOML run configuration; the `[synth]` section is used.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Write same-size super-resolution training pairs instead of
        /// registration pairs.
        #[arg(long)]
        training: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Register { lr, hr, scale_init, focal_hr, focal_lr, p, config, out } => {
            let zoom = match (scale_init, focal_hr, focal_lr) {
                (Some(s), _, _) => s,
                (None, Some(fh), Some(fl)) => initial_scale(fh, fl)?,
                _ => return Err(Error::config("register needs --scale-init or --focal-hr with --focal-lr")),
            };
            if !(zoom > 0.0 && zoom.is_finite()) {
                return Err(Error::config(format!("initial zoom must be positive, got {zoom}")));
            }
            let mut cfg = config.load()?;
            if let Some(p) = p {
                cfg.registration.p = p;
            }
            let luma = cfg.metrics.luma;
            let lr = ImagePlane::load_y(&lr, luma)?;
            let hr = ImagePlane::load_y(&hr, luma)?;
            let result = register_any_p(&lr, &hr, &AffineTransform::from_zoom(zoom), &cfg.registration)?;
            create_dir(&out)?;
            result.aligned.save_png(&out.join("aligned.png"))?;
            let record = result.to_record();
            write_text(&out.join("registration.txt"), &record)?;
            print!("{record}");
            Ok(())
        }
        Command::Pyramid { image, out } => {
            let img = ImagePlane::load_y(&image, Default::default())?;
            let pyr = decompose(&img)?;
            create_dir(&out)?;
            for (i, level) in pyr.levels().iter().enumerate() {
                let (h, w) = level.dims();
                TensorContainer::from_f64(&[h, w], level.data())?.write(&out.join(format!("level{i}.kpnt")))?;
                println!("level{i} {h}x{w}");
            }
            Ok(())
        }
        Command::Apply { image, t0, t1, t2, out } => {
            let img = ImagePlane::load_y(&image, Default::default())?;
            let pyr = decompose(&img)?;
            let t = [read_kernels(&t0)?, read_kernels(&t1)?, read_kernels(&t2)?];
            apply_lp_kpn(&pyr, &t[0], &t[1], &t[2])?.save_png(&out)
        }
        Command::Train { config, data, iters, seed, out } => {
            let mut cfg = config.load()?;
            if let Some(n) = iters {
                cfg.train.iters = n;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let pairs = load_pairs(&data, cfg.metrics.luma)?;
            let outcome = train_toy(&pairs, &cfg.model, &cfg.train)?;
            create_dir(&out)?;
            save_weights(&out, &cfg.model, &outcome.params)?;
            let curve: String = outcome.loss_curve.iter().map(|l| format!("{l:.9e}\n")).collect();
            write_text(&out.join("loss.txt"), &curve)?;
            println!(
                "pairs {} iters {} initial_loss {:.6e} final_loss {:.6e}",
                pairs.len(),
                cfg.train.iters,
                outcome.initial_loss,
                outcome.final_loss
            );
            Ok(())
        }
        Command::Predict { image, weights, out } => {
            let (cfg, params) = load_weights(&weights)?;
            let img = ImagePlane::load_y(&image, Default::default())?;
            predict(&img, &cfg, &params)?.save_png(&out)
        }
        Command::Eval { pred, gt, config } => {
            let cfg = config.load()?;
            let a = ImagePlane::load_y(&pred, cfg.metrics.luma)?;
            let b = ImagePlane::load_y(&gt, cfg.metrics.luma)?;
            let (psnr, ssim) = evaluate_planes(&a, &b, &cfg.metrics)?;
            println!("{}  PSNR {psnr:.3} dB  SSIM {ssim:.4}", pred.display());
            println!("average  PSNR {psnr:.3} dB  SSIM {ssim:.4}");
            Ok(())
        }
        Command::Synth { spec, training, seed, count, out } => {
            let mut cfg = match &spec {
                Some(p) => RunConfig::load(p)?.synth,
                None => Default::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = count {
                cfg.count = n;
            }
            cfg.validate()?;
            create_dir(&out)?;
            if training {
                let blur = match cfg.blur_sigma_range {
                    (0.0, 0.0) => (0.8, 1.6),
                    r => r,
                };
                for (i, (lr, hr)) in
                    sr_training_pairs(cfg.count, cfg.size, blur, cfg.noise_sigma, cfg.seed)?.iter().enumerate()
                {
                    lr.save_png(&out.join(format!("pair{i:03}_lr.png")))?;
                    hr.save_png(&out.join(format!("pair{i:03}_hr.png")))?;
                }
                println!("wrote {} training pairs", cfg.count);
                return Ok(());
            }
            for (i, sc) in registration_suite(&cfg)?.iter().enumerate() {
                sc.case.lr.save_png(&out.join(format!("pair{i:03}_lr.png")))?;
                sc.case.target.save_png(&out.join(format!("pair{i:03}_hr.png")))?;
                let p = sc.case.truth.params();
                let truth = format!(
                    "tau {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}\nalpha {:.12e}\nbeta {:.12e}\nzoom {:.12e}\nseed {}\n",
                    p[0], p[1], p[2], p[3], p[4], p[5], sc.case.lum.alpha, sc.case.lum.beta, sc.zoom, sc.seed
                );
                write_text(&out.join(format!("pair{i:03}_truth.txt")), &truth)?;
            }
            println!("wrote {} registration pairs", cfg.count);
            Ok(())
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(format!("{}: {e}", p.display())))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(format!("{}: {e}", p.display())))
}

fn read_kernels(p: &Path) -> Result<KernelTensor> {
    let c = TensorContainer::read(p)?;
    let dims = c.dims_usize();
    let [kk, h, w] = dims[..] else {
        return Err(Error::shape(format!("{}: kernel tensor must have rank 3, got {dims:?}", p.display())));
    };
    let k = (kk as f64).sqrt().round() as usize;
    if k * k != kk {
        return Err(Error::shape(format!("{}: {kk} kernel planes is not a square", p.display())));
    }
    KernelTensor::new(k, h, w, c.to_f64())
}

/// Pairs `<stem>_lr.png` with `<stem>_hr.png`, sorted by stem.
fn load_pairs(dir: &Path, luma: crate::image::LumaStandard) -> Result<Vec<(ImagePlane, ImagePlane)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("{}: {e}", dir.display())))?;
    let mut stems = Vec::new();
    for entry in entries {
        let name = entry.map_err(Error::from)?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_lr.png") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::io(format!("no *_lr.png files in {}", dir.display())));
    }
    stems
        .iter()
        .map(|s| {
            let lr = ImagePlane::load_y(&dir.join(format!("{s}_lr.png")), luma)?;
            let hr = ImagePlane::load_y(&dir.join(format!("{s}_hr.png")), luma)?;
            lr.ensure_same_dims(&hr, s)?;
            Ok((lr, hr))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    layers: Vec<ManifestLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    name: String,
    in_channels: usize,
    out_channels: usize,
    /// Offset of the weights in the flat parameter tensor; biases follow.
    offset: usize,
}

fn save_weights(dir: &Path, cfg: &ModelConfig, params: &LpkpnParams) -> Result<()> {
    let mut offset = 0;
    let layers = params
        .layers()
        .into_iter()
        .map(|(name, l)| {
            let entry = ManifestLayer { name, in_channels: l.in_channels, out_channels: l.out_channels, offset };
            offset += l.num_params();
            entry
        })
        .collect();
    let manifest = Manifest { model: cfg.clone(), layers };
    let text = toml::to_string(&manifest).map_err(|e| Error::io(e.to_string()))?;
    write_text(&dir.join("manifest.toml"), &text)?;
    TensorContainer::from_f64(&[offset], &params.to_flat())?.write(&dir.join("weights.kpnt"))
}

fn load_weights(dir: &Path) -> Result<(ModelConfig, LpkpnParams)> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut params = LpkpnParams::zeros(&manifest.model)?;
    let names: Vec<String> = params.layers().into_iter().map(|(n, _)| n).collect();
    let listed: Vec<&String> = manifest.layers.iter().map(|l| &l.name).collect();
    if names.iter().collect::<Vec<_>>() != listed {
        return Err(Error::shape("manifest layers do not match the model configuration"));
    }
    params.set_flat(&TensorContainer::read(&dir.join("weights.kpnt"))?.to_f64())?;
    Ok((manifest.model, params))
}
