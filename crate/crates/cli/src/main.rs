fn main() {
    std::process::exit(mdfr_cli::run(std::env::args_os()));
}
