use clap::Parser;
use colony_cli::commands::{error_line, execute, exit_code, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = execute(&cli, &mut |line| println!("{line}")) {
        eprintln!("{}", error_line(&err));
        std::process::exit(exit_code(&err));
    }
}
