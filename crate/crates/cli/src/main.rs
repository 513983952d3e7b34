use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::PipelineConfig;

/// Train and apply per-identity privacy masks against embedding-based face
/// identification.
#[derive(Debug, Parser)]
#[command(name = "p3mask", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Pipeline configuration file (TOML); flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Run directory for outputs.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
struct MaskFlags {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Team model ids, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "ID,ID")]
    team: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    Protection,
    Unmask,
    Adaptive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic identity corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train and admit the embedding model pool.
    TrainModels {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Rank teams by focal diversity and pick the most diverse.
    SelectTeam {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        models: Option<PathBuf>,
        /// Team size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train one mask per identity.
    TrainMask {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        models: Option<PathBuf>,
        /// Mask owners, comma separated; defaults to the configured set.
        #[arg(long, value_delimiter = ',', value_name = "ID")]
        identity: Option<Vec<String>>,
        #[command(flatten)]
        mask: MaskFlags,
    },
    /// Subtract a mask from an image's face crop.
    Protect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        #[arg(long, value_name = "PATH")]
        mask: PathBuf,
        /// Face box as `top,left,side`; the centered square when absent.
        #[arg(long, value_name = "T,L,S")]
        crop: Option<String>,
    },
    /// Add a mask back to a protected image's face crop.
    Unmask {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        #[arg(long, value_name = "PATH")]
        mask: PathBuf,
        #[arg(long, value_name = "T,L,S")]
        crop: Option<String>,
    },
    /// Run an evaluation scenario and write its report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        models: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        masks: Option<PathBuf>,
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[command(flatten)]
        mask: MaskFlags,
    },
    /// Compare loss gradients against central differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, edit: impl FnOnce(&mut PipelineConfig)) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    edit(&mut cfg);
    let cfg = cfg.normalized();
    cfg.mask.validate()?;
    Ok(cfg)
}

fn apply_mask_flags(cfg: &mut PipelineConfig, f: &MaskFlags) {
    let m = &mut cfg.mask;
    if let Some(v) = f.eta {
        m.eta = v;
    }
    if let Some(v) = f.batch {
        m.batch = v;
    }
    if let Some(v) = f.epsilon {
        m.epsilon = v;
    }
    if let Some(v) = f.omega {
        m.omega = v;
    }
    if let Some(v) = f.epochs {
        m.epochs = v;
    }
    if let Some(v) = &f.team {
        m.team = v.clone();
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            identities,
            images,
            size,
        } => {
            let cfg = resolve(&common, |c| {
                set(&mut c.data.identities, identities);
                set(&mut c.data.images, images);
                set(&mut c.data.size, size);
            })?;
            commands::gen_data(&cfg, &common.out)
        }
        Command::TrainModels { common, data } => {
            let cfg = resolve(&common, |c| c.inputs.data = data.or(c.inputs.data.take()))?;
            commands::train_models(&cfg, &common.out)
        }
        Command::SelectTeam {
            common,
            data,
            models,
            size,
        } => {
            let cfg = resolve(&common, |c| {
                c.inputs.data = data.or(c.inputs.data.take());
                c.inputs.models = models.or(c.inputs.models.take());
                set(&mut c.team_size, size);
            })?;
            commands::select_team(&cfg, &common.out)
        }
        Command::TrainMask {
            common,
            data,
            models,
            identity,
            mask,
        } => {
            let cfg = resolve(&common, |c| {
                c.inputs.data = data.or(c.inputs.data.take());
                c.inputs.models = models.or(c.inputs.models.take());
                set(&mut c.protected, identity);
                apply_mask_flags(c, &mask);
            })?;
            commands::train_masks(&cfg, &common.out)
        }
        Command::Protect {
            common,
            image,
            mask,
            crop,
        } => {
            let cfg = resolve(&common, |_| {})?;
            commands::apply(&cfg, &common.out, &image, &mask, crop.as_deref(), false)
        }
        Command::Unmask {
            common,
            image,
            mask,
            crop,
        } => {
            let cfg = resolve(&common, |_| {})?;
            commands::apply(&cfg, &common.out, &image, &mask, crop.as_deref(), true)
        }
        Command::Evaluate {
            common,
            data,
            models,
            masks,
            scenario,
            format,
            mask,
        } => {
            let cfg = resolve(&common, |c| {
                c.inputs.data = data.or(c.inputs.data.take());
                c.inputs.models = models.or(c.inputs.models.take());
                c.inputs.masks = masks.or(c.inputs.masks.take());
                if let Some(s) = scenario {
                    c.eval.scenario = s.to_possible_value().unwrap().get_name().to_string();
                }
                if let Some(f) = format {
                    c.eval.format = f.to_possible_value().unwrap().get_name().to_string();
                }
                apply_mask_flags(c, &mask);
            })?;
            commands::evaluate(&cfg, &common.out)
        }
        Command::GradCheck { common } => {
            let cfg = resolve(&common, |_| {})?;
            commands::grad_check(&cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::GateFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
