fn main() {
    std::process::exit(modembed::cli::run(std::env::args_os()));
}
