fn main() {
    std::process::exit(spadapt::cli::run(std::env::args_os()));
}
