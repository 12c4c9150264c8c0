use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SNOWS_LOG", "warn")).init();
    let cli = snows_cli::args::Cli::parse();
    let code = match snows_cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            let report = snows_cli::ErrorReport::new(&e);
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            report.code
        }
    };
    std::process::exit(code);
}
