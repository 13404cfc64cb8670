fn main() {
    std::process::exit(nesb::cli::run(std::env::args_os()));
}
