use clap::Parser;

fn main() {
    std::process::exit(ras_core::cli::run(ras_core::cli::Cli::parse()));
}
