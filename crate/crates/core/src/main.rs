use clap::Parser;

use efdpgen::cli::{exit_code, run_cli, Cli};

fn main() {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = run_cli(cli, &mut stdout) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
