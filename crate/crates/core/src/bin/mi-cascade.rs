fn main() {
    std::process::exit(mi_cascade::cli::main());
}
