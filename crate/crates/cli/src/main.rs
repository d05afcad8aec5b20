use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IECD2_LOG", "warn")).init();
    let cli = iecd2_cli::Cli::parse();
    if let Err(e) = iecd2_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
