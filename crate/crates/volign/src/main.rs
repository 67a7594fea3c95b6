fn main() {
    std::process::exit(volign::cli::run(std::env::args_os()));
}
