mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use skyalign::config::Config;
use skyalign::retrieval::Protocol;

/// Exit code for malformed command lines.
const EXIT_USAGE: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "skyalign", version, about = "UAV/satellite geo-localization: train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, the loss log and curve plots.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the retrieval protocols.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Repeatable; defaults to the configured protocols.
        #[arg(long, value_parser = parse_protocol)]
        protocol: Vec<Protocol>,
        /// Use the label oracle instead of a trained encoder.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Gallery entries per query in the ranked-result dump.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Train the three schedule variants on identical seeds and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds `seed, seed+1, ...` are used for every variant.
        #[arg(long, default_value_t = 1)]
        num_seeds: u64,
    },
    /// Export the synthetic dataset as a University-1652 style image tree.
    Toygen {
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate plots and the summary for an output directory.
    Report {
        /// Directory written by train, eval or ablate.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the config file (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    image_size: Option<ImageSize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ImageSize {
    #[value(name = "256")]
    S256,
    #[value(name = "384")]
    S384,
    Toy,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: skyalign::Error| e.to_string())
}

impl Common {
    /// Preset (or file), then image size, overrides and seed.
    fn build_config(&self, base: Option<Config>) -> skyalign::Result<Config> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => Config::from_file(path)?,
            (None, Some(base)) => base,
            (None, None) => match self.image_size {
                Some(ImageSize::S256) => Config::full(256),
                Some(ImageSize::S384) => Config::full(384),
                Some(ImageSize::Toy) | None => Config::toy(),
            },
        };
        if self.config.is_some() {
            match self.image_size {
                Some(ImageSize::S256) => cfg.set("data.image_size", "256")?,
                Some(ImageSize::S384) => cfg.set("data.image_size", "384")?,
                Some(ImageSize::Toy) => cfg.set("data.source", "toy")?,
                None => {}
            }
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { common, checkpoint } => commands::train(&common, checkpoint.as_deref()),
        Command::Eval { common, checkpoint, protocol, oracle, top_k } => {
            commands::eval(&common, checkpoint.as_deref(), &protocol, oracle, top_k)
        }
        Command::Ablate { common, num_seeds } => commands::ablate(&common, num_seeds),
        Command::Toygen { common } => commands::toygen(&common),
        Command::Report { out } => commands::report(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
