use clap::Parser;

fn main() {
    let cli = udgan_cli::Cli::parse();
    if let Err(e) = udgan_cli::run(cli) {
        eprintln!("udgan: {e}");
        std::process::exit(e.exit_code());
    }
}
