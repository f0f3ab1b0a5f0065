fn main() -> std::process::ExitCode {
    condaug::cli::run(std::env::args_os())
}
