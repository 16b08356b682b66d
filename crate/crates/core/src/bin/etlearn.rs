fn main() {
    std::process::exit(etlearn_core::cli::main_with_args(std::env::args_os()));
}
