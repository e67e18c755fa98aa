fn main() {
    std::process::exit(fremure::cli::run(std::env::args_os()));
}
