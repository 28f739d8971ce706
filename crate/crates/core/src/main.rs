fn main() {
    std::process::exit(mrp::cli::main_with_args(std::env::args_os()));
}
