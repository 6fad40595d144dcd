//! Batch command-line front end: reproducible runs wiring the data
//! pipeline, the latent-GP and baseline models, and the evaluation harness.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use commands::CmdError;
use config::RunConfig;

const USAGE: &str = "\
usage: glycast <command> [--config FILE] [--KEY VALUE]...

commands:
  synth       generate a seeded synthetic cohort (glucose.csv, side.csv)
  train       fit latent models from CSV data and write model files
  predict     forecast forward from the latest window of each user
  evaluate    compare models on a shared split and write report.json
  importance  forward step-wise contextual-signal importance
  sparsity    evaluate across minimum-observation filters
  gradcheck   finite-difference check of the training gradients

Every configuration key (key=value lines in the --config file) can also be
passed as `--key value`; flags win over the file.";

fn parse_args(
    args: &[String],
) -> Result<(String, Option<PathBuf>, Vec<(String, String)>), String> {
    let Some(command) = args.first() else {
        return Err("missing command".to_string());
    };
    let mut config_path = None;
    let mut overrides = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let Some(key) = flag.strip_prefix("--") else {
            return Err(format!("expected a --flag, got `{flag}`"));
        };
        let Some(value) = args.get(i + 1) else {
            return Err(format!("flag --{key} needs a value"));
        };
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            overrides.push((key.replace('-', "_"), value.clone()));
        }
        i += 2;
    }
    Ok((command.clone(), config_path, overrides))
}

fn exit_code_for(err: &glycast::Error) -> u8 {
    use glycast::Error::*;
    match err {
        // numerical failures
        IllConditioned { .. } | NonFinite(_) | FitFailure { .. } => 3,
        // everything else is a problem with the data or its description
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") || args.is_empty() {
        eprintln!("{USAGE}");
        return ExitCode::from(if args.is_empty() { 1 } else { 0 });
    }

    let (command, config_path, overrides) = match parse_args(&args) {
        Ok(parsed) => parsed,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(1);
        }
    };

    let cfg = match RunConfig::load(config_path.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(1);
        }
    };

    let outcome = match command.as_str() {
        "synth" => commands::cmd_synth(&cfg),
        "train" => commands::cmd_train(&cfg),
        "predict" => commands::cmd_predict(&cfg),
        "evaluate" => commands::cmd_evaluate(&cfg),
        "importance" => commands::cmd_importance(&cfg),
        "sparsity" => commands::cmd_sparsity(&cfg),
        "gradcheck" => commands::cmd_gradcheck(&cfg),
        other => {
            eprintln!("error: unknown command `{other}`\n{USAGE}");
            return ExitCode::from(1);
        }
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CmdError::Lib(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
