fn main() {
    std::process::exit(rarenet_cli::run(std::env::args_os()));
}
