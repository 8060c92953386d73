fn main() {
    std::process::exit(chatpainter::cli::main_with_args(std::env::args_os()));
}
