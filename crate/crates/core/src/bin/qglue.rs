fn main() {
    std::process::exit(qglue::cli::main_with_args(std::env::args_os()));
}
