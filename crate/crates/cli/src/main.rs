//! `credassign` command line.
//!
//! Errors go to stderr as one line, `error kind=<kind> code=<n> msg=<text>`,
//! and the process exits with `<n>`:
//!
//! | code | kind         | cause                                        |
//! |------|--------------|----------------------------------------------|
//! | 1    | internal     | anything else                                |
//! | 2    | usage        | bad or unknown flags                         |
//! | 3    | io           | missing or unreadable files                  |
//! | 4    | format       | malformed data, checkpoint or dump files     |
//! | 5    | empty_subset | an analysis subset with no samples           |
//! | 6    | config       | invalid settings                             |
//! | 7    | diverged     | training produced a non-finite loss          |

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return report(&CliError::usage(e.to_string()));
        }
    };
    match commands::run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(e.code)
}
