fn main() {
    std::process::exit(aslrlab::cli::main_with_args(std::env::args_os()));
}
