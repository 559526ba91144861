fn main() {
    std::process::exit(chanprune::cli::run(std::env::args_os()));
}
