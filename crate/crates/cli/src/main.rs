fn main() -> std::process::ExitCode {
    fedsim_cli::app::main_with_args(std::env::args_os())
}
