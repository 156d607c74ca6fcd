fn main() {
    std::process::exit(stitchguard_cli::run_cli(std::env::args_os()));
}
