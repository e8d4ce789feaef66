fn main() {
    std::process::exit(velonet::cli::run(std::env::args_os()));
}
