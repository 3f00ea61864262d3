use std::process::ExitCode;

use clap::Parser;
use cirlab::commands::dispatch;
use cirlab::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(doc) => {
            println!("{}", serde_json::to_string_pretty(&doc).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(1)
        }
    }
}
