fn main() {
    std::process::exit(shapcast::cli::run_cli());
}
