fn main() {
    std::process::exit(dmrimap::cli::run(std::env::args_os()));
}
