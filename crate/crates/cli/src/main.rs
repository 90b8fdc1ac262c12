fn main() {
    std::process::exit(tracekit_cli::run_cli(std::env::args_os()));
}
