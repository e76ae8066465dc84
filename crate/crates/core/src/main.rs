fn main() {
    std::process::exit(commprune::harness::cli::run(std::env::args_os()));
}
