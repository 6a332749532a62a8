use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use mbrs::checkpoint;
use mbrs::harness::config::ExperimentConfig;
use mbrs::harness::corpus::write_corpus;
use mbrs::harness::experiments::{
    ablate_pools, ablation_pools, bits_to_hex, compare_schedules, diffusion_analysis, embed, evaluate_table,
    export_residuals, extract, hex_to_bits, save_jpeg, sweep_strength, train_model, Provenance,
};
use mbrs::harness::report::Table;
use mbrs::imaging::load_rgb;
use mbrs::network::{StrengthFactor, Watermarker, RESIDUAL_SUPPORT_THRESHOLD};
use mbrs::noise::NoisePool;
use mbrs::training::run_schedule;
use mbrs::{Error, Result};

#[derive(Parser)]
#[command(name = "mbrs", version, about = "Train and evaluate JPEG-robust image watermarking models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (flat key = value file).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the training and the evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Extra `key=value` settings applied on top of the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with the configured schedule.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// BER per evaluation noise, plus PSNR/SSIM.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Strength factor; defaults to eval.strength.
        #[arg(long)]
        strength: Option<f64>,
    },
    /// BER over the strength and JPEG quality grids.
    SweepStrength {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one model per noise pool and compare under real JPEG.
    AblatePool {
        #[command(flatten)]
        common: Common,
        /// Pools separated by `;`, e.g. "jpegmask;jpegmask,jpeg:50". Defaults
        /// to the five standard combinations.
        #[arg(long)]
        pools: Option<String>,
    },
    /// Train MBRS, OEDS, TSR and TSR-S with matched budgets and compare.
    CompareSchedules {
        #[command(flatten)]
        common: Common,
    },
    /// Write cover, encoded and residual images.
    ExportResiduals {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
    },
    /// Embed a hex message into an image.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        message: String,
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
        /// Also write a JPEG copy at this quality.
        #[arg(long)]
        jpeg_quality: Option<u32>,
    },
    /// Print the hex message decoded from an image.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Compare one-bit residual support (first `--images` test images) and
    /// crop robustness (whole test set) with and without the diffusion
    /// layers.
    DiffusionAnalysis {
        #[command(flatten)]
        common: Common,
        /// Model without diffusion; trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model with diffusion; trained from the config when absent.
        #[arg(long)]
        diffusion_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        images: usize,
        #[arg(long, default_value_t = 0.035)]
        crop: f64,
    },
    /// Write a procedural image corpus as PNG files.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&common.overrides)?;
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_model(path: &Path) -> Result<(Watermarker, String)> {
    let bytes = std::fs::read(path).map_err(|e| mbrs::error::Error::Io { path: path.into(), source: e })?;
    let hash = checkpoint::sha256_hex(&bytes);
    Ok((checkpoint::from_bytes(&bytes)?.model, hash))
}

fn emit(table: &Table, out: &Path, stem: &str) -> Result<()> {
    print!("{}", table.to_text());
    table.write(out, stem)?;
    info!("wrote {}", out.join(format!("{stem}.csv")).display());
    Ok(())
}

fn provenance(cfg: &ExperimentConfig, checkpoint_hash: Option<String>) -> Provenance {
    Provenance { config_hash: Some(cfg.hash()), checkpoint_hash }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let data = cfg.load_train()?;
            let (train, validation) = match cfg.train.schedule {
                mbrs::training::Schedule::Oeds => {
                    let (v, t) = data.split(cfg.validation_count)?;
                    (t, Some(v))
                }
                _ => (data, None),
            };
            std::fs::create_dir_all(&common.out).map_err(|e| Error::Io { path: common.out.clone(), source: e })?;
            let cfg_path = common.out.join("config.txt");
            std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::Io { path: cfg_path, source: e })?;
            let outcome = run_schedule(&cfg.train, cfg.model, &train, validation.as_ref(), Some(&common.out))?;
            if let Some(e) = outcome.selected_epoch {
                info!("kept epoch {} by validation BER", e + 1);
            }
            let last = outcome.checkpoints.last().cloned().unwrap_or_default();
            println!("{}", last.display());
        }
        Command::Evaluate { common, checkpoint, strength } => {
            let cfg = load_config(&common)?;
            let (model, hash) = load_model(&checkpoint)?;
            let cfg = ExperimentConfig { model: *model.config(), ..cfg };
            let test = cfg.load_test()?;
            let s = StrengthFactor::new(strength.unwrap_or(cfg.strength))?;
            let (table, _) = evaluate_table(
                &model,
                test.images(),
                &cfg.eval_noises,
                s,
                cfg.eval_batch,
                cfg.eval_seed,
                &provenance(&cfg, Some(hash)),
            )?;
            emit(&table, &common.out, "evaluate")?;
        }
        Command::SweepStrength { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (model, hash) = load_model(&checkpoint)?;
            let cfg = ExperimentConfig { model: *model.config(), ..cfg };
            let test = cfg.load_test()?;
            let r = sweep_strength(
                &model,
                test.images(),
                &cfg.strength_grid,
                &cfg.quality_grid,
                cfg.eval_batch,
                cfg.eval_seed,
                &provenance(&cfg, Some(hash)),
            )?;
            emit(&r.table, &common.out, "sweep_strength")?;
        }
        Command::AblatePool { common, pools } => {
            let cfg = load_config(&common)?;
            let pools: Vec<NoisePool> = match pools {
                Some(text) => text.split(';').map(|p| p.parse()).collect::<Result<_>>()?,
                None => ablation_pools(),
            };
            let train = cfg.load_train()?;
            let test = cfg.load_test()?;
            let r = ablate_pools(&cfg, &pools, &train, test.images(), Some(&common.out))?;
            emit(&r.table, &common.out, "ablate_pool")?;
        }
        Command::CompareSchedules { common } => {
            let cfg = load_config(&common)?;
            let data = cfg.load_train()?;
            let (validation, train) = data.split(cfg.validation_count)?;
            let test = cfg.load_test()?;
            let r = compare_schedules(&cfg, &train, &validation, test.images(), Some(&common.out))?;
            emit(&r.table, &common.out, "compare_schedules")?;
        }
        Command::ExportResiduals { common, checkpoint, count, strength } => {
            let cfg = load_config(&common)?;
            let (model, _) = load_model(&checkpoint)?;
            let cfg = ExperimentConfig { model: *model.config(), test_count: count, ..cfg };
            let test = cfg.load_test()?;
            let ex = export_residuals(&model, test.images(), StrengthFactor::new(strength)?, cfg.eval_seed, &common.out)?;
            for i in &ex.degenerate {
                warn!("image {i}: zero residual");
            }
            for f in &ex.files {
                println!("{}", f.display());
            }
        }
        Command::Embed { common, checkpoint, image, message, strength, jpeg_quality } => {
            let (model, _) = load_model(&checkpoint)?;
            let bits = hex_to_bits(&message, model.geometry().message_len as usize)?;
            let cover = load_rgb(&image)?;
            let encoded = embed(&model, &cover, &bits, StrengthFactor::new(strength)?)?;
            std::fs::create_dir_all(&common.out).map_err(|e| Error::Io { path: common.out.clone(), source: e })?;
            let png = common.out.join("encoded.png");
            encoded.save(&png)?;
            println!("{}", png.display());
            if let Some(q) = jpeg_quality {
                let jpg = common.out.join(format!("encoded_q{q}.jpg"));
                save_jpeg(&encoded, q, &jpg)?;
                println!("{}", jpg.display());
            }
        }
        Command::Extract { common: _, checkpoint, image } => {
            let (model, _) = load_model(&checkpoint)?;
            let img = load_rgb(&image)?;
            println!("{}", bits_to_hex(&extract(&model, &img)?));
        }
        Command::DiffusionAnalysis { common, checkpoint, diffusion_checkpoint, images, crop } => {
            let cfg = load_config(&common)?;
            let get = |path: Option<PathBuf>, diffusion: bool| -> Result<(Watermarker, String)> {
                match path {
                    Some(p) => load_model(&p),
                    None => {
                        let mut c = cfg.clone();
                        c.model.diffusion = diffusion;
                        let dir = common.out.join(if diffusion { "diffusion" } else { "plain" });
                        let (m, bytes) = train_model(&c, &c.load_train()?, None, Some(&dir))?;
                        Ok((m, checkpoint::sha256_hex(&bytes)))
                    }
                }
            };
            let (plain, h1) = get(checkpoint, false)?;
            let (diffused, h2) = get(diffusion_checkpoint, true)?;
            let test = ExperimentConfig { model: *plain.config(), ..cfg.clone() }.load_test()?;
            let support = test.slice(0, images.min(test.len()))?;
            let r = diffusion_analysis(
                &plain,
                &diffused,
                support.images(),
                test.images(),
                RESIDUAL_SUPPORT_THRESHOLD,
                crop,
                cfg.eval_batch,
                cfg.eval_seed,
                &provenance(&cfg, Some(format!("{h1},{h2}"))),
            )?;
            emit(&r.table, &common.out, "diffusion_analysis")?;
        }
        Command::SynthCorpus { out, count, size, seed } => {
            let paths = write_corpus(&out, count, size, size, seed)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
