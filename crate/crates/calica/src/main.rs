fn main() {
    std::process::exit(calica::cli::run(std::env::args_os()));
}
