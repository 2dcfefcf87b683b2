use std::process::ExitCode;

use clap::Parser;
use ifgmi_cli::{Cli, ErrorReport};

fn fail(command: &str, kind: &str, message: String, code: u8) -> ExitCode {
    let report = ErrorReport { command, kind, message, exit_code: code as i32 };
    eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("ifgmi", "usage", e.to_string().trim().to_string(), 2),
    };
    match ifgmi_cli::run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(cli.command.name(), e.kind(), e.to_string(), 1),
    }
}
