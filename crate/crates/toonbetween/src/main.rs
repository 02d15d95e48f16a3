fn main() {
    std::process::exit(toonbetween::cli::main_with_args(std::env::args_os()));
}
