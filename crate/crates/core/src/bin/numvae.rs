use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use numvae::cli::commands::{self, criteria_overrides};
use numvae::cli::RunConfig;
use numvae::Result;

#[derive(Parser)]
#[command(
    name = "numvae",
    version,
    about = "VAE workbench for emergent numerosity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    master_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset
    GenData {
        /// warmup, probe or desk
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build a manifest for an external labelled image folder
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// CSV of `image,label` with labels 0-4 or 4+
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a VAE
    Train {
        /// Synthetic dataset directory
        #[arg(long, alias = "data")]
        synthetic: PathBuf,
        /// Natural-image dataset directory, mixed in after warm-up
        #[arg(long)]
        natural: Option<PathBuf>,
        /// paper, desk or tiny
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the regression probe on every latent dimension
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// e.g. r2=0.05,comp=0.1
        #[arg(long)]
        criteria: Option<String>,
        /// Report CSV
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a softmax readout on frozen latents and report count AP
    Readout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// AP CSV
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode latent traversals of one image
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Dataset used to estimate per-dimension spread
        #[arg(long)]
        reference: PathBuf,
        /// e.g. 3,77
        #[arg(long)]
        dims: Option<String>,
        /// e.g. -2..2 or -1,0,1
        #[arg(long, allow_hyphen_values = true)]
        deltas: Option<String>,
        /// Grid PNG; a CSV index is written alongside
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Response profile of one dimension over numerosity and area
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        /// Profile CSV; the plot goes to the same name with .png
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check manifest invariants
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        /// Regenerate synthetic records and compare
        #[arg(long)]
        rerender: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run_config(name: &str, common: Common, out: PathBuf, extra: Vec<String>) -> RunConfig {
    let mut overrides = extra;
    overrides.extend(common.overrides);
    RunConfig {
        command: name.into(),
        config_path: common.config,
        overrides,
        out,
        master_seed: common.master_seed,
    }
}

fn flag<T: ToString>(key: &str, v: Option<T>) -> Option<String> {
    v.map(|v| format!("{key}={}", v.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            preset,
            count,
            out,
            common,
        } => {
            let extra = [flag("preset", preset), flag("count", count)]
                .into_iter()
                .flatten()
                .collect();
            let m = commands::gen_data(&run_config("gen-data", common, out, extra))?;
            println!(
                "generated {} scenes, histogram {:?}",
                m.records.len(),
                m.header.class_counts
            );
        }
        Command::Ingest {
            root,
            labels,
            out,
            common,
        } => {
            let m = commands::ingest(&run_config("ingest", common, out, vec![]), &root, &labels)?;
            println!(
                "ingested {} images, histogram {:?}",
                m.records.len(),
                m.header.class_counts
            );
        }
        Command::Train {
            synthetic,
            natural,
            preset,
            out,
            common,
        } => {
            let extra = flag("arch", preset).into_iter().collect();
            let outcome = commands::train(
                &run_config("train", common, out, extra),
                &synthetic,
                natural.as_deref(),
            )?;
            if let Some(s) = outcome.stats.last() {
                println!(
                    "trained {} epochs, final val loss {:.6}",
                    s.epoch + 1,
                    s.val_loss.total
                );
            }
        }
        Command::Probe {
            checkpoint,
            manifest,
            criteria,
            out,
            common,
        } => {
            let extra = match criteria {
                Some(c) => criteria_overrides(&c)?,
                None => vec![],
            };
            let report = commands::probe(
                &run_config("probe", common, out, extra),
                &checkpoint,
                &manifest,
            )?;
            let class = report.column("class").unwrap_or(0);
            for kind in ["numerosity", "area"] {
                let dims: Vec<&str> = report
                    .rows
                    .iter()
                    .filter(|r| r[class] == kind)
                    .map(|r| r[0].as_str())
                    .collect();
                println!("{kind} detectors: [{}]", dims.join(", "));
            }
        }
        Command::Readout {
            checkpoint,
            train,
            eval,
            out,
            common,
        } => {
            let (ap, chance) = commands::readout(
                &run_config("readout", common, out, vec![]),
                &checkpoint,
                &train,
                &eval,
            )?;
            println!("mean AP {:.4} (chance {:.4})", ap.mean, chance.mean);
        }
        Command::Traverse {
            checkpoint,
            image,
            reference,
            dims,
            deltas,
            out,
            common,
        } => {
            let extra = [flag("dims", dims), flag("deltas", deltas)]
                .into_iter()
                .flatten()
                .collect();
            let report = commands::traverse(
                &run_config("traverse", common, out, extra),
                &checkpoint,
                &image,
                &reference,
            )?;
            println!("decoded {} tiles", report.rows.len());
        }
        Command::Profile {
            checkpoint,
            manifest,
            dim,
            out,
            common,
        } => {
            let extra = flag("dim", dim).into_iter().collect();
            let report = commands::profile(
                &run_config("profile", common, out, extra),
                &checkpoint,
                &manifest,
            )?;
            println!("{} profile cells", report.rows.len());
        }
        Command::Verify {
            manifest,
            rerender,
            out,
            common,
        } => {
            let extra = rerender
                .then(|| "rerender=true".to_string())
                .into_iter()
                .collect();
            commands::verify(&run_config("verify", common, out, extra), &manifest)?;
            println!("manifest ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
