fn main() {
    std::process::exit(pathfunnel::cli::run(std::env::args_os()));
}
