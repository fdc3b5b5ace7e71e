fn main() {
    std::process::exit(loopsoup::cli::main());
}
