use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(yae_cli::run(std::env::args()) as u8)
}
