fn main() {
    std::process::exit(mirage_core::cli::run(std::env::args_os()));
}
