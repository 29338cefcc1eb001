fn main() {
    std::process::exit(slim::cli::run(std::env::args_os()));
}
