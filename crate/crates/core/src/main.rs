fn main() {
    std::process::exit(avkd::cli::run(std::env::args_os()));
}
