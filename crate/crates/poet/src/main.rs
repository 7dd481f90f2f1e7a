fn main() {
    std::process::exit(poet::cli::run());
}
