fn main() {
    std::process::exit(robcov::harness::cli::run(std::env::args_os()));
}
