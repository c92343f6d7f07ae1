fn main() {
    std::process::exit(qieemo::cli::run_cli(std::env::args_os()));
}
