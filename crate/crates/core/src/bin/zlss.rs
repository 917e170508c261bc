fn main() {
    std::process::exit(zlss::cli::run(std::env::args_os()));
}
