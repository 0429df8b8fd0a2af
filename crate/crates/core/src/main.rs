fn main() {
    std::process::exit(vlground::harness::cli::main_with_args(std::env::args_os()));
}
