fn main() {
    std::process::exit(crossvideo::cli::run(std::env::args_os()));
}
