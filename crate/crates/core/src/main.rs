fn main() {
    std::process::exit(hazecraft::cli::run(std::env::args_os()));
}
