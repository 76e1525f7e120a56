use clap::Parser;

fn main() {
    let cli = brrl_cli::Cli::parse();
    if let Err(e) = brrl_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
