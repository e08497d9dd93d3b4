fn main() {
    std::process::exit(prlm_core::cli::run(std::env::args_os()));
}
