fn main() {
    std::process::exit(cylcert::cli::run(std::env::args_os()));
}
