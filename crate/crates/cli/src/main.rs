fn main() {
    std::process::exit(rrlm_cli::run(std::env::args_os()));
}
