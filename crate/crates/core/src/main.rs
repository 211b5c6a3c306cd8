fn main() {
    std::process::exit(skclt::cli::main_with_args(std::env::args_os()));
}
