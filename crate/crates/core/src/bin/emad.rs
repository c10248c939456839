fn main() {
    std::process::exit(emad::cli::main_with_args(std::env::args_os()));
}
