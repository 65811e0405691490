fn main() {
    std::process::exit(gabril::cli::run(std::env::args()));
}
