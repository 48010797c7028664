fn main() {
    std::process::exit(fastbat::cli::run_cli(std::env::args_os()));
}
