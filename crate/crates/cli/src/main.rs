use clap::Parser;

fn main() {
    std::process::exit(towerlab_cli::run(towerlab_cli::Cli::parse()));
}
