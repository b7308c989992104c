use std::process::ExitCode;

fn main() -> ExitCode {
    skigear::cli::run(std::env::args_os())
}
