use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cmpnet", version, about = "Channel max pooling experiments on synthetic vehicles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic vehicle dataset.
    GenData(GenDataArgs),
    /// Train a toycar network and write metrics, model and run config.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset's test split.
    Eval(EvalArgs),
    /// Run finite-difference gradient checks.
    GradCheck(GradCheckArgs),
    /// Print parameter counts with and without CMP.
    Params(ParamsArgs),
    /// Suggest a CMP stride for C channels and compression r.
    SuggestStride(SuggestStrideArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub test_per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
    /// key=value file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// baseline (GAP), wogap (flatten) or cmp.
    #[arg(long, default_value = "cmp")]
    pub variant: String,
    /// CMP compression ratio.
    #[arg(long)]
    pub r: Option<f64>,
    /// CMP stride; suggested from C and r when omitted.
    #[arg(long)]
    pub s: Option<usize>,
    /// Hidden units in the first dense layer.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for metrics.csv, model.cmpm and run.cfg.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Fully connected learning rate at epoch 0.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub conv_lr_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub wd: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub quiet: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Model file; defaults to <run>/model.cmpm.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Operator name or `all`.
    #[arg(long, default_value = "all")]
    pub op: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// densenet161-head, vgg16-head, resnet152-head or toycar.
    #[arg(long, default_value = "densenet161-head")]
    pub preset: String,
    #[arg(long, default_value_t = 16.0)]
    pub r: f64,
    #[arg(long)]
    pub s: Option<usize>,
    /// Defaults to 256 for head presets and 64 for toycar.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 196)]
    pub classes: usize,
    /// Image size for the toycar preset.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SuggestStrideArgs {
    #[arg(long)]
    pub c: usize,
    #[arg(long)]
    pub r: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Failure while assembling arguments; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

pub fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Turns `key=value` lines into flags for `subcommand`. Blank lines and
/// lines starting with `#` are skipped.
pub fn config_to_flags(subcommand: &str, text: &str) -> Result<Vec<OsString>, UsageError> {
    let cmd = command();
    let sub = cmd
        .find_subcommand(subcommand)
        .ok_or_else(|| UsageError(format!("unknown subcommand {subcommand}")))?;
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key=value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key) && key != "config")
            .ok_or_else(|| UsageError(format!("unknown config key {key:?} for {subcommand}")))?;
        if arg.get_action().takes_values() {
            flags.push(format!("--{key}").into());
            flags.push(value.into());
        } else {
            match value {
                "true" => flags.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(UsageError(format!("config key {key} expects true or false, got {value:?}"))),
            }
        }
    }
    Ok(flags)
}

fn config_path(args: &[OsString]) -> Option<(usize, PathBuf)> {
    args.iter().enumerate().find_map(|(i, a)| {
        let a = a.to_str()?;
        if a == "--config" {
            args.get(i + 1).map(|p| (i, PathBuf::from(p)))
        } else {
            a.strip_prefix("--config=").map(|p| (i, PathBuf::from(p)))
        }
    })
}

/// Parses `argv`, splicing in flags from `--config` ahead of the
/// command-line flags so the latter take precedence.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, ParseFailure> {
    let argv = match (argv.get(1).and_then(|s| s.to_str()), config_path(&argv)) {
        (Some(sub), Some((_, path))) if !sub.starts_with('-') => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ParseFailure::Usage(UsageError(format!("cannot read {}: {e}", path.display()))))?;
            let flags = config_to_flags(sub, &text).map_err(ParseFailure::Usage)?;
            let mut merged = argv[..2].to_vec();
            merged.extend(flags);
            merged.extend_from_slice(&argv[2..]);
            merged
        }
        _ => argv,
    };
    let matches = command().try_get_matches_from(argv).map_err(ParseFailure::Clap)?;
    Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap)
}

pub enum ParseFailure {
    Clap(clap::Error),
    Usage(UsageError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<OsString> {
        s.split_whitespace().map(OsString::from).collect()
    }

    #[test]
    fn cli_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn config_flags_are_overridden() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# comment\nepochs=5\nlr=0.2\nno-augment=true\nvariant=wogap\n").unwrap();
        let cli = parse(argv(&format!(
            "cmpnet train --data d --out o --config {} --epochs 7",
            cfg.display()
        )))
        .ok()
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.epochs, 7);
        assert_eq!(t.lr, 0.2);
        assert!(t.no_augment);
        assert_eq!(t.model.variant, "wogap");
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        assert!(config_to_flags("train", "epochz=3").is_err());
        assert!(config_to_flags("train", "no-augment=maybe").is_err());
        assert!(config_to_flags("train", "just text").is_err());
        assert_eq!(config_to_flags("train", "no-augment=false\n\n").unwrap(), Vec::<OsString>::new());
    }
}
