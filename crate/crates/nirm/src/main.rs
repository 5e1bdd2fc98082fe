use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nirm::config::ExperimentConfig;
use nirm::core::train::Variant;
use nirm::{datafile, report, run, OUT_DIR_ENV};

/// Non-linear invariant risk minimization for trajectory generation.
#[derive(Debug, Parser)]
#[command(name = "nirm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides a configuration key, e.g. `--set train.steps.joint=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config, &self.overrides)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-environment dataset.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `$NIRM_OUT_DIR/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant, resuming from stages already in the output directory.
    Train {
        #[arg(long)]
        variant: Variant,
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest; defaults to `dataset_manifest` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; defaults to `$NIRM_OUT_DIR/runs/<variant>_seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a model checkpoint on one split.
    Eval {
        /// Checkpoint manifest (`checkpoints/model.json` of a run).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One of train, in_domain, ood.
        #[arg(long, default_value = "ood")]
        split: String,
        /// Defaults to `$NIRM_OUT_DIR/eval/<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Samples drawn in the SVG overlay; 0 disables it.
        #[arg(long, default_value_t = 8)]
        overlay: usize,
    },
    /// Build the ablation table and bar chart from run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Defaults to `$NIRM_OUT_DIR/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `--out`, else `$NIRM_OUT_DIR/<default>`, else the configured output root.
fn out_dir(out: Option<PathBuf>, configured: Option<&Path>, default: &str) -> Result<PathBuf> {
    if let Some(o) = out {
        return Ok(o);
    }
    if let Some(root) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return Ok(PathBuf::from(root).join(default));
    }
    if let Some(root) = configured {
        return Ok(root.join(default));
    }
    bail!("no output directory: pass --out, set {OUT_DIR_ENV} or set output_dir in the config")
}

fn log_config(cfg: &ExperimentConfig) {
    eprintln!("effective config:\n{}", cfg.to_toml());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::SynthData { config, out } => {
            let cfg = config.load()?;
            log_config(&cfg);
            let out = out_dir(out, cfg.output_dir.as_deref(), "data")?;
            let manifest = datafile::make_dataset(&cfg.dataset, &cfg.architecture, &out)?;
            datafile::load_dataset(&manifest).context("verifying the written dataset")?;
            println!("{}", manifest.display());
        }
        Command::Train {
            variant,
            config,
            data,
            out,
        } => {
            let cfg = config.load()?.with_variant(variant);
            log_config(&cfg);
            let data = data
                .or_else(|| cfg.dataset_manifest.clone())
                .context("no dataset: pass --data or set dataset_manifest in the config")?;
            let default = format!("runs/{}_seed{}", variant.tag(), cfg.seed);
            let out = out_dir(out, cfg.output_dir.as_deref(), &default)?;
            let tag = variant.tag();
            run::train_run(&cfg, &data, &out, move |m| eprintln!("[{tag}] {m}"))?;
            println!("{}", out.join(run::RUN_FILE).display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            overlay,
        } => {
            let split = report::parse_split(&split)?;
            let out = out_dir(out, None, &format!("eval/{}", split.name()))?;
            let (r, files) = report::eval_command(&checkpoint, &data, split, &out, overlay)?;
            print!("{}", r.to_text());
            println!("{}", files.csv.display());
        }
        Command::Report { runs, out } => {
            let out = out_dir(out, None, "report")?;
            let (rows, files) = report::report_command(&runs, &out)?;
            print!("{}", nirm::core::metrics::ablation_text(&rows));
            println!("{}", files.csv.display());
        }
    }
    Ok(())
}
