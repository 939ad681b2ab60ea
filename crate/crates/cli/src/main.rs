fn main() {
    std::process::exit(polyinter_cli::run(std::env::args_os()));
}
