fn main() {
    std::process::exit(brl_cli::run(std::env::args()));
}
