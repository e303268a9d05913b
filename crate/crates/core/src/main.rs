use std::process::ExitCode;

use metapoison::cli;

fn main() -> ExitCode {
    let cli = match cli::parse_args(std::env::args()) {
        Ok(c) => c,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                ce.exit();
            }
            eprintln!("{}", cli::error_json(&e));
            return ExitCode::FAILURE;
        }
    };
    match cli::run(&cli, &mut |msg| eprintln!("{msg}")) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", cli::error_json(&e.into()));
            ExitCode::FAILURE
        }
    }
}
