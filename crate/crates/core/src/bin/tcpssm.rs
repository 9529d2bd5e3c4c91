use clap::Parser;
use tcp_ssm::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
