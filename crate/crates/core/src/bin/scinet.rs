use std::process::ExitCode;

fn main() -> ExitCode {
    scinet_core::cli::main_with_args(std::env::args_os())
}
