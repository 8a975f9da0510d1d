fn main() {
    std::process::exit(mapmend::cli::run());
}
