fn main() {
    std::process::exit(kpp_cli::run(std::env::args_os()));
}
