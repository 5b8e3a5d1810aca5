mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::{Cli, Command};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// One machine-readable line, then the cause chain for humans.
fn report(kind: &str, err: &anyhow::Error) {
    eprintln!("error: kind={kind} message={:?}", err.to_string());
    for cause in err.chain().skip(1) {
        eprintln!("  caused by: {cause}");
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(f) = err.downcast_ref::<commands::Failure>() {
        return f.kind;
    }
    err.chain()
        .find_map(|e| e.downcast_ref::<capsnet_core::Error>())
        .map_or("runtime", |e| e.kind())
}

fn flag_accepted(sub: &str, flag: &str) -> bool {
    Cli::command()
        .find_subcommand(sub)
        .is_some_and(|c| c.get_arguments().any(|a| a.get_long() == Some(flag)))
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let argv = match config::apply(raw, flag_accepted) {
        Ok(a) => a,
        Err(e) => {
            report("usage", &e);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: kind=usage message={first:?}");
            eprint!("{}", e.render());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: kind=usage message=\"--threads must be at least 1\"");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            report("runtime", &e.into());
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let result = match &cli.command {
        Command::Convert(a) => commands::convert(a),
        Command::Augment(a) => commands::augment(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), &e);
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
