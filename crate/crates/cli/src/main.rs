mod args;
mod commands;

use std::process::ExitCode;

use args::ParseFailure;

fn threads_from_env() -> Result<usize, String> {
    match std::env::var("CMPNET_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("CMPNET_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn main() -> ExitCode {
    let cli = match args::parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
        Err(ParseFailure::Usage(e)) => {
            eprintln!("error: {}", e.0);
            return ExitCode::from(2);
        }
    };
    match threads_from_env() {
        Ok(n) => cmpnet::parallel::set_threads(n),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
