fn main() {
    std::process::exit(servesim_cli::main_with_args(std::env::args_os()));
}
