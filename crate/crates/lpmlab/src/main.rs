use std::process::ExitCode;

fn main() -> ExitCode {
    lpmlab::cli::main_with(std::env::args_os())
}
