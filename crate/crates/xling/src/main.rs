fn main() {
    std::process::exit(xling::cli::run(std::env::args_os()));
}
