use std::process::ExitCode;

fn main() -> ExitCode {
    multivul::cli::run(std::env::args_os())
}
