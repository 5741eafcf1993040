fn main() {
    std::process::exit(fpd::cli::run(std::env::args_os()));
}
