fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(blanket_cli::run(std::env::args_os()))
}
