use clap::Parser;

fn main() {
    let cli = anisoq_cli::Cli::parse();
    if let Err(err) = anisoq_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(anisoq_cli::exit_code(&err));
    }
}
