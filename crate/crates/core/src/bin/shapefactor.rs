fn main() {
    std::process::exit(shapefactor::cli::run());
}
