fn main() {
    std::process::exit(capsnet_core::cli::run(std::env::args_os()));
}
