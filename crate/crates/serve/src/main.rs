fn main() {
    std::process::exit(tinylora_serve::cli::main_with_args(std::env::args_os()));
}
