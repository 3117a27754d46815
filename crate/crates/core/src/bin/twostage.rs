fn main() {
    std::process::exit(twostage::cli::run_from_args(std::env::args_os()));
}
