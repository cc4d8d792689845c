use std::process::ExitCode;

fn main() -> ExitCode {
    crossvid::cli::main_with_args(std::env::args_os())
}
