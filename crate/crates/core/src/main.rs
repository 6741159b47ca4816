use clap::Parser;
use copdex::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
