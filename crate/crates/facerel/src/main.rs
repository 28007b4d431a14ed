fn main() {
    std::process::exit(facerel::cli::main_with(std::env::args_os()));
}
