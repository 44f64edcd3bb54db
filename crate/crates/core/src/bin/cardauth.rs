use std::process::ExitCode;

fn main() -> ExitCode {
    cardauth::cli::run(std::env::args_os())
}
