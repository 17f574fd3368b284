fn main() {
    std::process::exit(habnet::cli::run_from(std::env::args_os()));
}
