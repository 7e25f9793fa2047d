fn main() {
    std::process::exit(srpl_core::cli::run_cli(std::env::args_os()));
}
