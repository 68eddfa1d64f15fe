use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dseb_core::data::{self, ImagePair, MaskKind};
use dseb_core::energy_net::EnergyNetConfig;
use dseb_core::gradcheck::suite;
use dseb_core::harness::{self, Checkpoint, EvalOptions};
use dseb_core::inference::{inpaint, InferenceConfig};
use dseb_core::training::{train_with_progress, TrainConfig};
use dseb_core::{Precision, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "dseb", version, about = "Energy-based image inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Center,
    HalfLeft,
}

#[derive(Subcommand)]
enum Command {
    /// Train an energy network and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Image directory or IDX file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "center")]
        mask: MaskArg,
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step loss curve as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Restore images without a mask.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// One image or a directory of images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask a dataset, restore it and report PSNR and MSE.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "center")]
        mask: MaskArg,
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        /// Paste known pixels back before scoring.
        #[arg(long)]
        composite: bool,
        /// Comparison grid of the first few samples (PNG or PGM).
        #[arg(long)]
        grid: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        order: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    net: serde_json::Map<String, serde_json::Value>,
    train: TrainConfig,
    #[serde(default)]
    precision: PrecisionArg,
}

#[derive(Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PrecisionArg {
    F32,
    #[default]
    F64,
}

const GRID_SAMPLES: usize = 8;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            data,
            mask,
            fraction,
            out,
            seed,
            report,
        } => run_train(&config, &data, mask_kind(mask, fraction), &out, seed, report.as_deref()),
        Command::Infer { ckpt, input, out } => with_precision(&ckpt, |p| match p {
            Precision::Single => run_infer::<f32>(&ckpt, &input, &out),
            Precision::Double => run_infer::<f64>(&ckpt, &input, &out),
        }),
        Command::Eval {
            ckpt,
            data,
            mask,
            fraction,
            composite,
            grid,
        } => {
            let kind = mask_kind(mask, fraction);
            with_precision(&ckpt, |p| match p {
                Precision::Single => run_eval::<f32>(&ckpt, &data, kind, composite, &grid),
                Precision::Double => run_eval::<f64>(&ckpt, &data, kind, composite, &grid),
            })
        }
        Command::Gradcheck { order, seed } => run_gradcheck(order, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn mask_kind(mask: MaskArg, fraction: f64) -> MaskKind {
    match mask {
        MaskArg::Center => MaskKind::Center { fraction },
        MaskArg::HalfLeft => MaskKind::HalfLeft,
    }
}

fn with_precision(ckpt: &Path, f: impl FnOnce(Precision) -> Result<ExitCode>) -> Result<ExitCode> {
    f(harness::peek_precision_file(ckpt)?)
}

fn load_dataset<S: Scalar>(path: &Path, channels: usize) -> Result<Vec<Tensor<S>>> {
    let images = if path.is_dir() {
        data::load_image_dir(path, channels)?
    } else {
        data::load_idx(path)?
    };
    if images.is_empty() {
        bail!("{}: no images found", path.display());
    }
    Ok(images)
}

/// Fills `image_side` and `input_channels` from the data when the config
/// leaves them out.
fn net_config(
    mut net: serde_json::Map<String, serde_json::Value>,
    first: &[usize],
) -> Result<EnergyNetConfig> {
    net.entry("image_side").or_insert(first[2].into());
    net.entry("input_channels").or_insert(first[1].into());
    let config: EnergyNetConfig =
        serde_json::from_value(serde_json::Value::Object(net)).context("invalid \"net\" config")?;
    config.validate()?;
    Ok(config)
}

fn run_train(
    config_path: &Path,
    data_path: &Path,
    mask: MaskKind,
    out: &Path,
    seed: Option<u64>,
    report: Option<&Path>,
) -> Result<ExitCode> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let mut run: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    if let Some(seed) = seed {
        run.train.seed = seed;
    }
    run.train.inner.track_graph = true;
    match run.precision {
        PrecisionArg::F32 => train_as::<f32>(run, data_path, mask, out, report),
        PrecisionArg::F64 => train_as::<f64>(run, data_path, mask, out, report),
    }
}

fn train_as<S: Scalar>(
    run: RunConfig,
    data_path: &Path,
    mask: MaskKind,
    out: &Path,
    report: Option<&Path>,
) -> Result<ExitCode> {
    let channels = run
        .net
        .get("input_channels")
        .and_then(|v| v.as_u64())
        .unwrap_or(1) as usize;
    let images = load_dataset::<S>(data_path, channels)?;
    let config = net_config(run.net, images[0].shape())?;
    let expected = config.image_shape();
    if let Some(i) = images.iter().position(|t| t.shape() != expected) {
        bail!("image {i} is {:?}, config expects {expected:?}", images[i].shape());
    }
    let pairs = images
        .iter()
        .map(|y| mask.apply(y))
        .collect::<dseb_core::Result<Vec<ImagePair<S>>>>()?;

    let every = (run.train.outer_steps / 20).max(1);
    let mut window = 0.0;
    let result = train_with_progress(&config, &pairs, &run.train, |m, loss| {
        window += loss.loss_sum;
        if (m + 1) % every == 0 {
            eprintln!("step {:>6}  loss {:.4}", m + 1, window / every as f64);
            window = 0.0;
        }
    })?;
    eprintln!("trained {} steps in {:.1?}", result.losses.len(), result.wall_time);

    let ckpt = Checkpoint {
        config,
        inference: InferenceConfig {
            track_graph: false,
            ..run.train.inner.clone()
        },
        params: result.params,
        mean_image: result.mean_image,
        adam: Some(result.adam),
    };
    ckpt.save(out)?;
    if let Some(path) = report {
        let mut csv = String::from("step,loss_sum,loss_per_pixel\n");
        for (m, l) in result.losses.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", m + 1, l.loss_sum, l.loss_per_pixel));
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_infer<S: Scalar>(ckpt_path: &Path, input: &Path, out: &Path) -> Result<ExitCode> {
    let ckpt = Checkpoint::<S>::load(ckpt_path)?;
    let files = if input.is_dir() {
        data::list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for file in files {
        let x = data::load_image::<S>(&file, ckpt.config.input_channels)?;
        let restored = inpaint(&ckpt.config, &x, &ckpt.params, &ckpt.mean_image, &ckpt.inference)
            .with_context(|| format!("restoring {}", file.display()))?;
        let name = file.file_name().context("input has no file name")?;
        data::save_image(&out.join(name), &restored)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_eval<S: Scalar>(
    ckpt_path: &Path,
    data_path: &Path,
    mask: MaskKind,
    composite: bool,
    grid: &Path,
) -> Result<ExitCode> {
    let ckpt = Checkpoint::<S>::load(ckpt_path)?;
    let images = load_dataset::<S>(data_path, ckpt.config.input_channels)?;
    let pairs = images
        .iter()
        .map(|y| mask.apply(y))
        .collect::<dseb_core::Result<Vec<_>>>()?;
    let options = EvalOptions {
        inference: ckpt.inference.clone(),
        composite,
    };
    let (report, outputs) = harness::evaluate(&ckpt, &pairs, &options)?;
    if report.infinite_psnr > 0 {
        eprintln!(
            "warning: {} exact reconstructions left out of the PSNR mean",
            report.infinite_psnr
        );
    }
    let rows: Vec<_> = pairs
        .iter()
        .zip(&outputs)
        .take(GRID_SAMPLES)
        .map(|(p, out)| (p.y.clone(), p.x.clone(), out.clone()))
        .collect();
    harness::export_grid(&rows, grid)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "PSNR={}", report.mean_psnr)?;
    writeln!(stdout, "MSE={}", report.mean_mse)?;
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(order: u8, seed: u64) -> Result<ExitCode> {
    let (checks, tol) = if order == 1 {
        (suite::first_order_suite(seed)?, suite::FIRST_ORDER_TOL)
    } else {
        let mut checks = suite::second_order_suite(seed)?;
        for steps in [1, 2] {
            checks.push(suite::unrolled_check(seed, steps, 20)?);
        }
        (checks, suite::SECOND_ORDER_TOL)
    };
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for c in &checks {
        println!(
            "{:<40} max_rel_err={:.3e} checked={} skipped={}",
            c.name, c.max_error, c.checked, c.skipped
        );
        worst = worst.max(c.max_error);
        ok &= c.passes(tol);
    }
    println!("max_rel_err={worst:.3e} tolerance={tol:e}");
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
