fn main() {
    std::process::exit(fundmatch::cli::run_main());
}
