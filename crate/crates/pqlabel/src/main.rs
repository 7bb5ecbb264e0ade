use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pqlabel::cli::run(std::env::args_os()))
}
