fn main() {
    std::process::exit(pcomb::cli::main_with_args(std::env::args_os()));
}
