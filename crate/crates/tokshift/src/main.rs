fn main() {
    std::process::exit(tokshift::cli::run(std::env::args_os()));
}
