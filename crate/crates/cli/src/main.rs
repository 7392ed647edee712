use std::process::ExitCode;

use clap::Parser;
use tsforge_cli::args::{Cli, Command};
use tsforge_cli::{evaluate_dirs, run_pipeline, run_single_stage, CliError, Layout, Stage};

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.command.overrides().resolve()?;
    match &cli.command {
        Command::Run(_) => {
            let m = run_pipeline(&cfg)?;
            for s in &m.stages {
                println!(
                    "{:<9} {:>7.2}s  {}",
                    s.stage.name(),
                    s.seconds,
                    s.notes.join("; ")
                );
            }
            println!(
                "manifest: {}",
                Layout::new(&cfg.out_dir).manifest().display()
            );
        }
        Command::Evaluate(e)
            if e.original.is_some() || e.generated.is_some() || e.report.is_some() =>
        {
            cfg.validate()?;
            let layout = Layout::new(&cfg.out_dir);
            let original = e.original.clone().unwrap_or_else(|| layout.windows());
            let generated = e.generated.clone().unwrap_or_else(|| layout.decoded());
            let report = e.report.clone().unwrap_or_else(|| layout.report());
            let r = evaluate_dirs(&cfg, &original, &generated, &report)?;
            for (m, s) in &r.scores {
                println!("{m:<4} {:.6}", s.mean);
            }
        }
        cmd => {
            let stage = cmd.stage().unwrap_or(Stage::Evaluate);
            let r = run_single_stage(stage, &cfg)?;
            println!(
                "{:<9} {:>7.2}s  {}",
                stage.name(),
                r.seconds,
                r.notes.join("; ")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e).and_then(|s| s.source());
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
