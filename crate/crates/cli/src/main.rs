fn main() {
    std::process::exit(treegen_cli::main_with_args(std::env::args_os()));
}
