fn main() {
    std::process::exit(posflow::cli::main_with_args(std::env::args_os()));
}
