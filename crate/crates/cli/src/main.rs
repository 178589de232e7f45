fn main() -> std::process::ExitCode {
    kernflow_cli::main_entry()
}
