fn main() {
    std::process::exit(eam_cli::run(std::env::args_os()));
}
