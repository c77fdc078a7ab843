use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = mia_audit::cli::Cli::parse();
    match mia_audit::cli::execute(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
