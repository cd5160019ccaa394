fn main() {
    env_logger::init();
    std::process::exit(lensopt::cli::run(std::env::args_os()));
}
