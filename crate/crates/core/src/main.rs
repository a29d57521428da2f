use clap::Parser;

use unmt::cli::{error_line, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNMT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", error_line(&e));
        std::process::exit(1);
    }
}
