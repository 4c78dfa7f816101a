fn main() {
    std::process::exit(sagegan::cli::run_from_args(std::env::args_os()));
}
