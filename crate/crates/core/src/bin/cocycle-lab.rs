fn main() {
    std::process::exit(cocycle_lab::cli::main_with_args(std::env::args_os()));
}
