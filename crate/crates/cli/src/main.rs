//! `moegan`: train, sample, interpolate, score and inspect text-conditioned
//! generators with routed expert blocks.
//!
//! Log verbosity follows `MOEGAN_LOG` (e.g. `MOEGAN_LOG=info`). Failures print
//! one JSON object on stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use candle_core::Tensor;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use moegan_core::data::{self, Dataset, SyntheticSpec};
use moegan_core::evaluation::{self, FidEvaluator, LatentSpace};
use moegan_core::export;
use moegan_core::generator::Generator;
use moegan_core::trainer::{self, LoopEvent, LoopHooks, Trainer};
use moegan_core::Config;

#[derive(Parser)]
#[command(name = "moegan", version, about = "Text-to-image GAN with sparsely routed expert blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Progressive training from a TOML configuration.
    Train {
        /// Configuration file.
        config: PathBuf,
        /// Continue from `<out_dir>/checkpoint.safetensors`.
        #[arg(long)]
        resume: bool,
        /// Loss weight override, e.g. `--set lambda_clip=0.5` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate images for a prompt.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate between two prompts (tokens) or two latents (z or w).
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: InterpMode,
        /// First prompt; also the prompt for latent modes.
        #[arg(long)]
        prompt: String,
        /// Second prompt (tokens mode).
        #[arg(long)]
        prompt_b: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Second seed (z and w modes).
        #[arg(long)]
        seed_b: Option<u64>,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Output PNG strip.
        #[arg(long)]
        out: PathBuf,
    },
    /// FID of a checkpoint against a dataset.
    EvalFid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image/caption folder; defaults to the data section of the
        /// checkpoint's configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer expert assignment maps for one prompt and seed.
    RouteViz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixel upscaling of each map cell.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic shapes dataset to an image/caption folder.
    MakeData {
        /// Synthetic spec (TOML); defaults to the built-in spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID between two disjoint random halves of a dataset, per resolution.
    ReferenceFid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Must match `model.extractor_width` of the run being compared.
        #[arg(long)]
        extractor_width: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpMode {
    Tokens,
    Z,
    W,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOEGAN_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        let kind = err
            .chain()
            .find_map(|e| e.downcast_ref::<moegan_core::Error>())
            .map(|e| e.kind())
            .unwrap_or("error");
        eprintln!("{}", json!({ "error": kind, "message": format!("{err:#}") }));
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            resume,
            overrides,
        } => train(&config, resume, &overrides),
        Command::Sample {
            checkpoint,
            prompt,
            count,
            seed,
            out,
        } => sample(&checkpoint, &prompt, count, seed, &out),
        Command::Interpolate {
            checkpoint,
            mode,
            prompt,
            prompt_b,
            seed,
            seed_b,
            steps,
            out,
        } => interpolate(&checkpoint, mode, &prompt, prompt_b.as_deref(), seed, seed_b, steps, &out),
        Command::EvalFid {
            checkpoint,
            data,
            n,
            seed,
        } => eval_fid(&checkpoint, data.as_deref(), n, seed),
        Command::RouteViz {
            checkpoint,
            prompt,
            seed,
            scale,
            out,
        } => route_viz(&checkpoint, &prompt, seed, scale, &out),
        Command::MakeData { spec, n, out } => make_data(spec.as_deref(), n, &out),
        Command::ReferenceFid {
            data,
            resolutions,
            n,
            seed,
            extractor_width,
        } => reference_fid(&data, &resolutions, n, seed, extractor_width),
    }
}

fn load_dataset(cfg: &Config) -> Result<Arc<Dataset>> {
    let base = *cfg.model.resolutions.last().context("empty resolution schedule")?;
    Ok(Arc::new(data::from_config(&cfg.data, base)?))
}

fn train(config: &Path, resume: bool, overrides: &[String]) -> Result<()> {
    let mut cfg = Config::load(config)?;
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        let value: f64 = value.parse().with_context(|| format!("override `{o}` needs a number"))?;
        cfg.loss.set(key.trim(), value)?;
    }
    cfg.validate()?;
    let dataset = load_dataset(&cfg)?;
    for w in dataset.warnings() {
        log::warn!("{w}");
    }
    let mut trainer = if resume {
        let path = cfg.train.out_dir.join("checkpoint.safetensors");
        let t = Trainer::load(&path, dataset)?;
        if t.config().hash() != cfg.hash() {
            log::warn!("resuming with the checkpoint's configuration; {} differs", config.display());
        }
        t
    } else {
        Trainer::new(cfg, dataset)?
    };
    let events = trainer.train_loop(LoopHooks::default())?;
    for ev in &events {
        if !matches!(ev, LoopEvent::Eval { .. }) {
            println!("{}", serde_json::to_string(ev)?);
        }
    }
    println!(
        "{}",
        json!({
            "checkpoint": trainer.checkpoint_path(),
            "step": trainer.state.step,
            "resolution": trainer.resolution(),
        })
    );
    Ok(())
}

fn to_image_tensor(out: &Tensor) -> Result<Tensor> {
    Ok(out.detach().clamp(-1f32, 1f32)?)
}

fn sample(checkpoint: &Path, prompt: &str, count: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let (_, g) = trainer::load_generator(checkpoint)?;
    let z = evaluation::sample_latents(seed, count, g.config().z_dim)?;
    let captions = vec![prompt.to_string(); count];
    let images = to_image_tensor(g.synthesize(&z, &captions)?.image())?;
    std::fs::create_dir_all(out)?;
    let res = g.resolution();
    for i in 0..count {
        let pixels = images.get(i)?.flatten_all()?.to_vec1::<f32>()?;
        export::write_rgb_png(&out.join(format!("sample_{i:03}.png")), &pixels, res, res)?;
    }
    let cols = (count as f64).sqrt().ceil() as usize;
    export::write_grid_png(&out.join("grid.png"), &images, cols)?;
    println!("{}", json!({ "images": count, "resolution": res, "out": out }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn interpolate(
    checkpoint: &Path,
    mode: InterpMode,
    prompt: &str,
    prompt_b: Option<&str>,
    seed: u64,
    seed_b: Option<u64>,
    steps: usize,
    out: &Path,
) -> Result<()> {
    if steps < 2 {
        bail!("--steps must be at least 2");
    }
    let (_, g) = trainer::load_generator(checkpoint)?;
    let alphas = evaluation::alpha_steps(steps);
    let z_dim = g.config().z_dim;
    let frames: Vec<Tensor> = match mode {
        InterpMode::Tokens => {
            let other = prompt_b.context("tokens mode needs --prompt-b")?;
            let z = evaluation::sample_latents(seed, 1, z_dim)?;
            let ta = g.text_tokens(&[prompt.to_string()])?;
            let tb = g.text_tokens(&[other.to_string()])?;
            evaluation::interpolate_tokens(&ta, &tb, &alphas)?
                .iter()
                .map(|t| render(&g, &g.style(&z, t)?, t))
                .collect::<Result<_>>()?
        }
        InterpMode::Z | InterpMode::W => {
            let other = seed_b.context("latent modes need --seed-b")?;
            let tokens = g.text_tokens(&[prompt.to_string()])?;
            let za = evaluation::sample_latents(seed, 1, z_dim)?;
            let zb = evaluation::sample_latents(other, 1, z_dim)?;
            if matches!(mode, InterpMode::Z) {
                evaluation::interpolate_latents(&za, &zb, LatentSpace::Z, &alphas)?
                    .iter()
                    .map(|z| render(&g, &g.style(z, &tokens)?, &tokens))
                    .collect::<Result<_>>()?
            } else {
                let wa = g.style(&za, &tokens)?;
                let wb = g.style(&zb, &tokens)?;
                evaluation::interpolate_latents(&wa, &wb, LatentSpace::W, &alphas)?
                    .iter()
                    .map(|w| render(&g, w, &tokens))
                    .collect::<Result<_>>()?
            }
        }
    };
    let strip = Tensor::cat(&frames, 0)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    export::write_grid_png(out, &strip, frames.len())?;
    println!("{}", json!({ "frames": frames.len(), "out": out }));
    Ok(())
}

fn render(g: &Generator, w: &Tensor, tokens: &moegan_core::text::TextTokens) -> Result<Tensor> {
    to_image_tensor(g.synthesize_from(w, tokens, g.resolution())?.image())
}

fn eval_fid(checkpoint: &Path, data_dir: Option<&Path>, n: usize, seed: u64) -> Result<()> {
    let (cfg, g) = trainer::load_generator(checkpoint)?;
    let dataset = match data_dir {
        Some(dir) => Arc::new(data::load_folder(dir, g.resolution())?),
        None => load_dataset(&cfg)?,
    };
    let evaluator = FidEvaluator::new(trainer::FID_EXTRACTOR_SEED, cfg.model.extractor_width);
    let fid = evaluator.fid_score(&g, &dataset, n, seed)?;
    println!(
        "{}",
        json!({ "fid": fid, "resolution": g.resolution(), "n": n, "seed": seed })
    );
    Ok(())
}

fn route_viz(checkpoint: &Path, prompt: &str, seed: u64, scale: usize, out: &Path) -> Result<()> {
    let (_, g) = trainer::load_generator(checkpoint)?;
    let viz = evaluation::route_viz(&g, prompt, seed)?;
    let paths = viz.write(out, scale)?;
    println!("{}", json!({ "layers": viz.layers.len(), "files": paths }));
    Ok(())
}

fn make_data(spec: Option<&Path>, n: usize, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| moegan_core::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let dataset = data::generate_synthetic(&spec, n)?;
    dataset.export_folder(out)?;
    println!(
        "{}",
        json!({ "images": dataset.len(), "resolution": spec.resolution, "hash": dataset.hash(), "out": out })
    );
    Ok(())
}

fn reference_fid(data_dir: &Path, resolutions: &[usize], n: usize, seed: u64, width: Option<usize>) -> Result<()> {
    let base = *resolutions.iter().max().context("no resolutions given")?;
    let dataset = data::load_folder(data_dir, base)?;
    let width = width.unwrap_or(moegan_core::config::ModelConfig::default().extractor_width);
    let evaluator = FidEvaluator::new(trainer::FID_EXTRACTOR_SEED, width);
    for &res in resolutions {
        let v = trainer::reference_fid(&evaluator, &dataset, res, n, seed)?;
        println!("{}", json!({ "resolution": res, "reference_fid": v, "n": n, "seed": seed }));
    }
    Ok(())
}
