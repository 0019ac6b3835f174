fn main() -> std::process::ExitCode {
    mmprune::cli::run(std::env::args_os())
}
