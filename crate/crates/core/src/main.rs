use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(irra_kit::cli::main_with_args(std::env::args().collect()))
}
