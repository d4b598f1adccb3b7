fn main() {
    std::process::exit(contraction_lab::cli::main_with_args(std::env::args_os()));
}
