use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(armtalk_service::cli::main_with(std::env::args()))
}
