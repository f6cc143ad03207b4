fn main() {
    std::process::exit(metermask::cli::run());
}
