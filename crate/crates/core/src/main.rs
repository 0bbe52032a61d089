fn main() {
    std::process::exit(usvkit::cli::run(std::env::args_os()));
}
