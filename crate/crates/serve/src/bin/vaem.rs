use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(vaem_serve::cli::LOG_ENV, "info")).init();
    vaem_serve::cli::main_with_args(std::env::args_os())
}
