fn main() {
    std::process::exit(gaitgraph::cli::run(std::env::args_os()));
}
