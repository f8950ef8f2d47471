use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffkan_cli::{
    ablation_table, cmd_ablate, cmd_evaluate, cmd_gen_data, cmd_inpaint, cmd_train, load_checkpoint, load_records,
    read_task_dir, record_tasks, CliResult, RunConfig, CONFIG_FILE,
};

#[derive(Parser)]
#[command(name = "diffkan", version, about = "Diffusion inpainting with spline-activation U-shaped denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    GenData(Common),
    /// Train a denoiser and save its EMA checkpoint.
    Train(Common),
    /// Inpaint tasks with a trained checkpoint.
    Inpaint {
        #[command(flatten)]
        common: Common,
        /// Output directory of a previous `train` run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of `<id>/image.dkt` + `<id>/mask.dkt` tasks; dataset slices when absent.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Score predictions against references matched by file name.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Append the published scores, labelled as not reproduced.
        #[arg(long)]
        paper_reference: bool,
    },
    /// Train and evaluate every configured architecture string.
    Ablate(Common),
}

fn resolve(common: &Common, fallback: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(dir)) => RunConfig::load(&dir.join(CONFIG_FILE))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common, None)?;
            let entries = cmd_gen_data(&cfg)?;
            println!("wrote {} subjects to {}", entries.len(), cfg.output_dir.display());
        }
        Command::Train(common) => {
            let cfg = resolve(&common, None)?;
            let outcome = cmd_train(&cfg)?;
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} parameters for {} steps in {:.1}s, final loss {last:.6}",
                outcome.parameters,
                outcome.losses.len(),
                outcome.wall_seconds
            );
        }
        Command::Inpaint {
            common,
            checkpoint,
            tasks,
        } => {
            if common.config.is_none() {
                load_checkpoint(&checkpoint, None)?;
            }
            let mut cfg = resolve(&common, Some(&checkpoint))?;
            if common.out.is_none() {
                cfg.output_dir = checkpoint.join("inpaint");
            }
            let tasks = match tasks {
                Some(dir) => read_task_dir(&dir)?,
                None => record_tasks(&load_records(&cfg, cfg.data.inpaint_split)?)?,
            };
            let records = cmd_inpaint(&cfg, &checkpoint, &tasks)?;
            for r in &records {
                println!("{} masked psnr {:.4} checksum {}", r.id, r.metrics.masked_psnr, r.checksum);
            }
        }
        Command::Evaluate {
            pred,
            reference,
            out,
            paper_reference,
        } => {
            let report = cmd_evaluate(&pred, &reference, &out, paper_reference)?;
            print!("{}", report.summary_table()?);
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common, None)?;
            print!("{}", ablation_table(&cmd_ablate(&cfg)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
