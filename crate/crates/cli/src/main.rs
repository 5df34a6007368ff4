use std::process::ExitCode;

fn main() -> ExitCode {
    match pfnet_cli::commands::run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
