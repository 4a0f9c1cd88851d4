use clap::Parser;
use newscnn::cli::{run, Cli};

fn main() {
    env_logger::init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.class().exit_code());
    }
}
