use std::process::ExitCode;

fn main() -> ExitCode {
    hg3nerf::cli::main_with_args(std::env::args_os())
}
