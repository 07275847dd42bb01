use clap::Parser;
use equarx_cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = equarx_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
