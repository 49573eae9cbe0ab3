fn main() {
    std::process::exit(ma3e::cli::main_with_args(std::env::args_os()));
}
