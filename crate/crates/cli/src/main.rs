//! Command-line entry point: fit the cohort stock-flow model, simulate
//! synthetic survey data, and run hold-out validation.

mod run;

use clap::Parser;

fn main() {
    let code = match run::Cli::try_parse() {
        Ok(cli) => match run::execute(cli) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Err(e) => {
            // clap's own help/version output is not an error.
            if e.use_stderr() {
                eprintln!("{e}");
                1
            } else {
                print!("{e}");
                0
            }
        }
    };
    std::process::exit(code);
}
