fn main() {
    std::process::exit(nestseg::cli::run(std::env::args_os()));
}
