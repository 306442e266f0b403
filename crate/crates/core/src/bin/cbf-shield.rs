fn main() {
    std::process::exit(cbf_shield::cli::main_with_args(std::env::args_os()));
}
