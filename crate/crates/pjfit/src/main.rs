fn main() {
    std::process::exit(pjfit::cli::run(std::env::args_os()));
}
