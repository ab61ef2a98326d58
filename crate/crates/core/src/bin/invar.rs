fn main() {
    std::process::exit(invar_core::cli::run(std::env::args_os()));
}
