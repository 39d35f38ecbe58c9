use clap::Parser;

fn main() {
    std::process::exit(fcil_cli::run(fcil_cli::Cli::parse()));
}
