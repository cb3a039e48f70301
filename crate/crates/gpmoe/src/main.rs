use clap::Parser;

fn main() {
    let cli = gpmoe::cli::Cli::parse();
    match gpmoe::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(error) => {
            eprintln!("error: {error}");
            std::process::exit(gpmoe::cli::exit_code_for(&error));
        }
    }
}
