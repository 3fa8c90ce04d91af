fn main() {
    std::process::exit(eigenopt::cli::run_cli(std::env::args_os()));
}
