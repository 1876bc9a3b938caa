fn main() {
    std::process::exit(xcnn::cli::run(std::env::args_os()));
}
