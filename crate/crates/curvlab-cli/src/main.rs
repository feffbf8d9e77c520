//! Command-line front end: train runs, hyperparameter grids, alignment and
//! progress diagnostics, posterior-sample dumps, and oracle validation.
//!
//! Configs are flat `key = value` files (see the library's harness module
//! for the key list); relative dataset paths resolve against the
//! `CURVLAB_DATA_DIR` environment variable. Exit status: 0 on success, 1 on
//! validation failure or runtime error, 2 on config or usage error.

use std::path::Path;
use std::process::ExitCode;

use curvlab::harness::{
    grid_search, laplace_sample_run, load_config, parse_gridfile, progress_run, run_experiment,
    summarize_alignment, validate_oracle_report, RunResult,
};
use curvlab::{Error, Result};

const USAGE: &str = "\
usage: curvlab <command> [args]

commands:
  train <config>                      train once per seed, write metric CSVs
  grid <config> <gridfile>            sweep the grid, select by final train loss
  align <run-dir>                     summarize alignment columns of a run dir
  progress <config>                   paired per-update-progress run
  laplace-sample <config> --samples N draw posterior weight samples
  validate-oracle                     run the dense-oracle agreement matrix
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invalid { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn usage_error(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    eprint!("{USAGE}");
    ExitCode::from(2)
}

fn arg<'a>(args: &'a [String], i: usize, what: &str) -> Result<&'a str> {
    args.get(i).map(|s| s.as_str()).ok_or_else(|| Error::Invalid {
        message: format!("missing {what}"),
    })
}

fn print_results(results: &[RunResult]) {
    for r in results {
        let mut line = format!("seed {}: final train loss {}", r.seed, r.final_train_loss);
        if let Some(el) = r.final_eval_loss {
            line.push_str(&format!(", eval loss {el}"));
        }
        if let Some(ea) = r.final_eval_accuracy {
            line.push_str(&format!(", eval accuracy {ea:.4}"));
        }
        if r.diverged {
            line.push_str(" (diverged)");
        }
        line.push_str(&format!(" -> {}", r.csv_path.display()));
        println!("{line}");
    }
}

fn dispatch(args: &[String]) -> Result<ExitCode> {
    let Some(command) = args.first() else {
        return Ok(usage_error("missing command"));
    };
    match command.as_str() {
        "train" => {
            let config = load_config(Path::new(arg(args, 1, "config path")?))?;
            let results = run_experiment(&config)?;
            print_results(&results);
            Ok(ExitCode::SUCCESS)
        }
        "grid" => {
            let base = curvlab::harness::parse_config_text(&std::fs::read_to_string(Path::new(
                arg(args, 1, "config path")?,
            ))?)?;
            let grid = parse_gridfile(&std::fs::read_to_string(Path::new(arg(
                args,
                2,
                "gridfile path",
            )?))?)?;
            let outcome = grid_search(&base, &grid)?;
            for (i, cell) in outcome.cells.iter().enumerate() {
                let overrides: Vec<String> = cell
                    .overrides
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                println!(
                    "cell {i}: {}  median final loss {}{}",
                    overrides.join(" "),
                    cell.median_final_loss,
                    if cell.diverged { " (diverged)" } else { "" }
                );
            }
            let best = &outcome.cells[outcome.best];
            let overrides: Vec<String> = best
                .overrides
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            println!(
                "best: cell {} ({}){}",
                outcome.best,
                overrides.join(" "),
                if outcome.on_boundary {
                    ", on a grid boundary — consider extending"
                } else {
                    ""
                }
            );
            Ok(ExitCode::SUCCESS)
        }
        "align" => {
            let mut out = std::io::stdout().lock();
            summarize_alignment(Path::new(arg(args, 1, "run directory")?), &mut out)?;
            Ok(ExitCode::SUCCESS)
        }
        "progress" => {
            let config = load_config(Path::new(arg(args, 1, "config path")?))?;
            let results = progress_run(&config)?;
            print_results(&results);
            Ok(ExitCode::SUCCESS)
        }
        "laplace-sample" => {
            let config = load_config(Path::new(arg(args, 1, "config path")?))?;
            if arg(args, 2, "--samples flag")? != "--samples" {
                return Err(Error::Invalid {
                    message: "expected '--samples N' after the config path".into(),
                });
            }
            let samples: usize = arg(args, 3, "sample count")?.parse().map_err(|_| {
                Error::Invalid {
                    message: "sample count must be a positive integer".into(),
                }
            })?;
            let path = laplace_sample_run(&config, samples)?;
            println!("wrote {samples} posterior samples to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        "validate-oracle" => {
            let mut out = std::io::stdout().lock();
            let ok = validate_oracle_report(&mut out)?;
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        other => Ok(usage_error(&format!("unknown command '{other}'"))),
    }
}
