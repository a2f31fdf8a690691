use clap::Parser;
use invgame::cli::{run, Cli};

fn main() {
    std::process::exit(run(&Cli::parse()));
}
