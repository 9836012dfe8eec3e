use clap::Parser;

fn main() {
    let cli = syncsel_cli::Cli::parse();
    if let Err(e) = syncsel_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
