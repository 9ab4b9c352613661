use clap::Parser;

fn main() {
    let cli = ctxdiff_cli::Cli::parse();
    if let Err(e) = ctxdiff_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
