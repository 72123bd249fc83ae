fn main() {
    std::process::exit(a2l::cli::run(std::env::args()));
}
