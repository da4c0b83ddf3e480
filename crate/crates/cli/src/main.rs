use std::process::ExitCode;

fn main() -> ExitCode {
    proteus_cli::run(std::env::args_os())
}
