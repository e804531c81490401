fn main() {
    std::process::exit(egmlm::cli::run_command(std::env::args_os()));
}
