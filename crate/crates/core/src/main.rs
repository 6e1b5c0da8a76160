fn main() {
    std::process::exit(m4pipe::cli::run(std::env::args_os()));
}
