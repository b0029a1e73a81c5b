fn main() {
    std::process::exit(alignpeft::cli::run(std::env::args_os()));
}
