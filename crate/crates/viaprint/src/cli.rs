// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, Context, Outcome};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "viaprint", version, about = "Via-pattern analysis of standard cell libraries")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (defaults to `<out>/manifest.json` if present).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Redo a stage even if its outputs exist.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Detect vias in every manifest instance and write the via cache.
    Extract,
    /// Build one representative per cell type from the via cache.
    BuildReps,
    /// Verify representatives on held-out instances and draw overlays.
    VerifyReps {
        /// Type ids (one per line) to rebuild with a stricter majority first.
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Score all same-width, functionally different type pairs.
    Analyze {
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// List types appearing in pairs scoring at or below a threshold.
    DontUse {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Classify every instance against the representatives.
    Detect,
    /// Evaluate detection against ground truth.
    Eval {
        /// Ground-truth file (defaults to `truth.json` next to the manifest).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Generate a synthetic library and rendered dataset.
    GenSynthetic {
        #[arg(long)]
        types: Option<usize>,
        #[arg(long)]
        instances_per_type: Option<usize>,
    },
}

/// Reads the config file and lays the flags over it.
pub fn resolve_config(common: &CommonArgs, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(w) = common.workers {
        cfg.workers = Some(w);
    }
    if let Some(s) = common.seed.or(cfg.seed) {
        cfg.apply_seed(s);
    }
    match command {
        Command::Analyze { top_k: Some(k) } => cfg.analysis.top_k = *k,
        Command::GenSynthetic {
            types,
            instances_per_type,
        } => {
            if let Some(t) = types {
                cfg.synthetic.library.type_count = *t;
            }
            if let Some(n) = instances_per_type {
                cfg.synthetic.dataset.instances_per_type = *n;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let ctx = Context::new(cfg, cli.common.force)?;
    match &cli.command {
        Command::Extract => commands::cmd_extract(&ctx),
        Command::BuildReps => commands::cmd_build_reps(&ctx),
        Command::VerifyReps { rejects } => commands::cmd_verify_reps(&ctx, rejects.as_deref()),
        Command::Analyze { .. } => commands::cmd_analyze(&ctx),
        Command::DontUse { threshold } => commands::cmd_dont_use(&ctx, *threshold),
        Command::Detect => commands::cmd_detect(&ctx),
        Command::Eval { truth } => commands::cmd_eval(&ctx, truth.as_deref()),
        Command::GenSynthetic { .. } => commands::cmd_gen_synthetic(&ctx),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(outcome) => {
            println!("{}", outcome.message());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

impl From<clap::Error> for Error {
    fn from(e: clap::Error) -> Self {
        Error::Usage(e.to_string())
    }
}
