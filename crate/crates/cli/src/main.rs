fn main() {
    std::process::exit(niff_cli::run_cli(std::env::args_os()));
}
