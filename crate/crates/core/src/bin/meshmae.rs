fn main() {
    std::process::exit(meshmae::cli::main_from(std::env::args_os()));
}
