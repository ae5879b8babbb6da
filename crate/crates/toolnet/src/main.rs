fn main() {
    std::process::exit(toolnet::cli::run(std::env::args_os()));
}
