fn main() {
    std::process::exit(mrgl::cli::main_with_args(std::env::args_os()));
}
