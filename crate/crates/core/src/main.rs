fn main() {
    std::process::exit(morrey_lab::cli::main_with_args(std::env::args()));
}
