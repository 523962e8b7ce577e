fn main() {
    std::process::exit(devsafe::cli::main_with_args(std::env::args_os()));
}
