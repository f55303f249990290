fn main() {
    std::process::exit(fairguard::cli::main_with_args(std::env::args_os()));
}
