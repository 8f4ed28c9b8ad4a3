use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lapda_cli::run(std::env::args_os()))
}
