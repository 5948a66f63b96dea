fn main() {
    std::process::exit(backmap_cli::run(std::env::args().collect()));
}
