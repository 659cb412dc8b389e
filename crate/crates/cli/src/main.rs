fn main() -> std::process::ExitCode {
    aerolog_cli::main_with_exit_code()
}
