fn main() {
    std::process::exit(finemanip::cli::run(std::env::args_os()));
}
