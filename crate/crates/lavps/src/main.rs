fn main() {
    std::process::exit(lavps::cli::run_from_env());
}
