fn main() {
    std::process::exit(flipguard::cli::execute(std::env::args_os()));
}
