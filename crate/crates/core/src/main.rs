fn main() {
    std::process::exit(ttso_core::cli::run_command(std::env::args_os()));
}
