use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use keycap::config::RunConfig;
use keycap::pipeline;
use keycap::train::LogRecord;
use keycap::Error;

#[derive(Parser, Debug)]
#[command(name = "keycap", version, about = "Keyword-guided image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Flat key=value configuration file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-key overrides, e.g. `--train.epochs 5 --decode.beams 1`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the train split and write vocabulary, checkpoint and log.
    Train(RunArgs),
    /// Caption every test record.
    Generate(RunArgs),
    /// Score test captions and write the metric report.
    Evaluate(RunArgs),
    /// Write a synthetic dataset.
    Synth(RunArgs),
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, found {flag:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

fn load(args: &RunArgs) -> Result<RunConfig, Error> {
    RunConfig::load(args.config.as_deref(), &parse_overrides(&args.overrides)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = load(&args)?;
            pipeline::cmd_synth(&cfg)?;
            println!("wrote {} records to {}", cfg.synth_records, cfg.paths.dataset.display());
        }
        Command::Train(args) => {
            let cfg = load(&args)?;
            let summary = pipeline::cmd_train(&cfg, |rec| match rec {
                LogRecord::Batch { .. } => log::debug!("{rec}"),
                LogRecord::Epoch { .. } => eprintln!("{rec}"),
            })?;
            println!(
                "trained {} parameters, vocabulary {}; best epoch {} val_loss={}",
                summary.parameters, summary.vocab_size, summary.best_epoch, summary.best_val_loss
            );
            println!("checkpoint: {}", cfg.paths.checkpoint.display());
        }
        Command::Generate(args) => {
            let cfg = load(&args)?;
            let captions = pipeline::cmd_generate(&cfg)?;
            println!("wrote {} captions to {}", captions.len(), cfg.paths.captions.display());
        }
        Command::Evaluate(args) => {
            let cfg = load(&args)?;
            let report = pipeline::cmd_evaluate(&cfg)?;
            println!(
                "bleu_avg={:.4} cider={:.4} rouge_l={:.4} meteor={:.4} (n={})",
                report.bleu_avg, report.cider, report.rouge_l, report.meteor, report.count
            );
            println!("report: {}", cfg.paths.report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
