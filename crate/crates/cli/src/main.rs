fn main() {
    std::process::exit(holoslide_cli::run(std::env::args_os()));
}
