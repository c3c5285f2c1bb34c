fn main() {
    std::process::exit(corrnet3d::cli::run_from(std::env::args_os()));
}
