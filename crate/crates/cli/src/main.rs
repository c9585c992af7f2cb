use std::process::ExitCode;

use clap::Parser;
use gla_icl_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(out) => {
            if out.out_path.is_none() {
                print!("{}", out.csv);
            }
            if let Some(check) = out.check {
                eprintln!("check passed: {}", check.message);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gla-icl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
