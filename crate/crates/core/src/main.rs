fn main() {
    std::process::exit(fairbench::cli::run(std::env::args_os()));
}
