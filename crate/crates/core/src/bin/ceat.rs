fn main() {
    std::process::exit(ceat_core::cli::run(std::env::args_os()));
}
