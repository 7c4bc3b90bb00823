fn main() {
    std::process::exit(lcrank::cli::run(std::env::args_os()));
}
