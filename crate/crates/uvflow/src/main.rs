fn main() {
    std::process::exit(uvflow::cli::run_from_env());
}
