fn main() {
    std::process::exit(meta3dseg::cli::main_with_args(std::env::args_os()));
}
