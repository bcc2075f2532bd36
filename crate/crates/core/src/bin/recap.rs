fn main() {
    std::process::exit(recap::cli::run(std::env::args_os()));
}
