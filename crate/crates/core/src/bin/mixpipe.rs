fn main() {
    std::process::exit(mixpipe::cli::run(std::env::args_os()));
}
