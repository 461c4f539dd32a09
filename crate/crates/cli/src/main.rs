//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 dataset error.

use std::path::{Path, PathBuf};

use icnn_metric_cli::commands::{self, CheckArgs, Failure};
use icnn_metric_cli::config::RunConfig;

const USAGE: &str = "\
usage: icnn-metric <command> [options]

commands:
  train   [--config FILE] [--out DIR] [--seed N] [--section.key value]...
          train an encoder, evaluate it, and write manifest, metrics,
          checkpoint, and embeddings into the run directory
  score   <data.csv> [--section.key value]...
          print the per-point and aggregate neighborhood score as JSON
  check   [--filter SUBSTRING] [--full] [--seeds N] [--inject-fault OP]
          run the property suite (gradients, bounds, reduction, dynamics)
  ablate  [--config FILE] [--out DIR] [--seed N] [--section.key value]...
          run the 12-row loss-combination grid and write ablation.csv

any configuration key can be overridden as --section.key value, for example
--train.epochs 20 or --icnn.mode support_only; --seed is shorthand for
--train.seed.";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match run(&args) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    };
    commands::flush_stdout();
    std::process::exit(code);
}

struct ParsedArgs {
    config_path: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    positional: Vec<String>,
    filter: Option<String>,
    inject_fault: Option<String>,
    full_profile: bool,
    grad_seeds: Option<u64>,
}

fn parse_args(args: &[String]) -> Result<ParsedArgs, Failure> {
    let mut parsed = ParsedArgs {
        config_path: None,
        out_dir: None,
        overrides: Vec::new(),
        positional: Vec::new(),
        filter: None,
        inject_fault: None,
        full_profile: false,
        grad_seeds: None,
    };
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(flag) = arg.strip_prefix("--") {
            if flag == "full" {
                parsed.full_profile = true;
                i += 1;
                continue;
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| Failure::config(format!("flag --{flag} needs a value")))?
                .clone();
            match flag {
                "config" => parsed.config_path = Some(PathBuf::from(&value)),
                "out" => parsed.out_dir = Some(PathBuf::from(&value)),
                "seed" => parsed.overrides.push(("train.seed".into(), value)),
                "filter" => parsed.filter = Some(value),
                "inject-fault" => parsed.inject_fault = Some(value),
                "seeds" => {
                    parsed.grad_seeds = Some(value.parse().map_err(|e| {
                        Failure::config(format!("--seeds needs an integer: {e}"))
                    })?)
                }
                key if key.contains('.') => {
                    parsed.overrides.push((key.to_string(), value));
                }
                other => {
                    return Err(Failure::config(format!(
                        "unknown flag --{other}; config overrides use --section.key value"
                    )))
                }
            }
            i += 2;
        } else {
            parsed.positional.push(arg.clone());
            i += 1;
        }
    }
    Ok(parsed)
}

fn load_config(parsed: &ParsedArgs) -> Result<RunConfig, Failure> {
    if let Some(p) = &parsed.config_path {
        if !p.exists() {
            return Err(Failure::config(format!(
                "config file {} does not exist",
                p.display()
            )));
        }
    }
    Ok(RunConfig::load(parsed.config_path.as_deref(), &parsed.overrides)?)
}

fn run(args: &[String]) -> Result<(), Failure> {
    let Some(command) = args.first() else {
        eprintln!("{USAGE}");
        return Err(Failure::config("missing command"));
    };
    let parsed = parse_args(&args[1..])?;
    match command.as_str() {
        "train" => {
            let cfg = load_config(&parsed)?;
            commands::cmd_train(&cfg, parsed.out_dir.as_deref())
        }
        "score" => {
            let [csv] = parsed.positional.as_slice() else {
                return Err(Failure::config("score needs exactly one CSV path"));
            };
            let cfg = load_config(&parsed)?;
            commands::cmd_score(Path::new(csv), &cfg)
        }
        "check" => commands::cmd_check(&CheckArgs {
            filter: parsed.filter,
            inject_fault: parsed.inject_fault,
            full_profile: parsed.full_profile,
            grad_seeds: parsed.grad_seeds,
        }),
        "ablate" => {
            let cfg = load_config(&parsed)?;
            commands::cmd_ablate(&cfg, parsed.out_dir.as_deref())
        }
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => {
            eprintln!("{USAGE}");
            Err(Failure::config(format!("unknown command {other:?}")))
        }
    }
}
