fn main() {
    std::process::exit(ccse_core::cli::run(std::env::args_os()));
}
