fn main() {
    std::process::exit(proxmmr::cli::main_with_args(std::env::args_os()));
}
