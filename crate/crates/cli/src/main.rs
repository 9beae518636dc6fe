//! `hotspot`: simulate, calibrate, monitor, baseline and evaluate.
//!
//! Exit codes: 0 success without alarm, 2 at least one alarm (monitor, baseline),
//! 1 any error including rejected flags.

mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use commands::{CmdResult, Outcome};

const SUBCOMMANDS: [&str; 5] = ["simulate", "calibrate", "monitor", "baseline", "evaluate"];

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format(|buf, r| {
            writeln!(
                buf,
                "level={} target={} msg=\"{}\"",
                r.level().as_str().to_ascii_lowercase(),
                r.target(),
                r.args().to_string().replace('"', "'")
            )
        })
        .init();
}

fn load_args() -> Result<Vec<OsString>, String> {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let Some(path) = config::config_path(&argv) else {
        return Ok(argv);
    };
    let text =
        std::fs::read_to_string(&path).map_err(|e| format!("--config {}: {e}", path.display()))?;
    let entries =
        config::parse_config(&text).map_err(|e| format!("--config {}: {e}", path.display()))?;
    Ok(config::merge(argv, &entries, &SUBCOMMANDS))
}

fn run(cli: &Cli, echo: &str) -> CmdResult<Outcome> {
    let name = cli.command.name();
    let (out, result) = match &cli.command {
        Command::Simulate(a) => {
            let out = commands::resolve_out(&a.out, &cli.out_root, name);
            let r = commands::simulate(a, &out);
            (out, r)
        }
        Command::Calibrate(a) => {
            let out = commands::resolve_out(&a.out, &cli.out_root, name);
            let r = commands::calibrate(a, &out);
            (out, r)
        }
        Command::Monitor(a) => {
            let out = commands::resolve_out(&a.run.out, &cli.out_root, name);
            let r = commands::monitor(a, &out);
            (out, r)
        }
        Command::Baseline(a) => {
            let out = commands::resolve_out(&a.run.out, &cli.out_root, name);
            let r = commands::baseline(a, &out);
            (out, r)
        }
        Command::Evaluate(a) => {
            let out = commands::resolve_out(&a.out, &cli.out_root, name);
            let r = commands::evaluate(a, &out);
            (out, r)
        }
    };
    let outcome = result?;
    config::write_effective_config(&out, echo)
        .map_err(|e| format!("cannot write config echo: {e}"))?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let argv = match load_args() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let mut cmd = Cli::command();
    let matches = match cmd.try_get_matches_from_mut(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    init_logging(&cli);
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let echo = config::effective_config(sub_cmd, sub);
    match run(&cli, &echo) {
        Ok(Outcome::Quiet) => ExitCode::SUCCESS,
        Ok(Outcome::Alarm) => ExitCode::from(2),
        Err(e) => {
            log::error!("command={name} error={e}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
