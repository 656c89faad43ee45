fn main() {
    std::process::exit(splitzo::cli::run_cli(std::env::args_os()));
}
