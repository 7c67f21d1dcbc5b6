use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = portraitgan_cli::Cli::parse();
    if let Err(e) = portraitgan_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(portraitgan_cli::exit_code(&e));
    }
}
