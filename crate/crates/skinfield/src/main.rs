use clap::Parser;
use skinfield::cli::{run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("{}", e.to_json_line());
        std::process::exit(1);
    }
}
