fn main() {
    std::process::exit(lomoe::cli::main_with_args(std::env::args_os()));
}
