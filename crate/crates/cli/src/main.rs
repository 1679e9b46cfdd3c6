use clap::Parser;

use abet_cli::commands::{error_line, exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            std::process::exit(exit_code(&e));
        }
    }
}
