fn main() {
    std::process::exit(sqdm_cli::run_from_args(std::env::args_os()));
}
