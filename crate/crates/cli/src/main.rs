fn main() {
    std::process::exit(crisisgraph_cli::app::run(std::env::args_os()));
}
