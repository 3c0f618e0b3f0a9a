fn main() {
    std::process::exit(nlwave::cli::main_with_args(std::env::args_os()));
}
