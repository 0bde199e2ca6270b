fn main() {
    std::process::exit(gaformer::cli::main_from_args(std::env::args_os()));
}
