fn main() {
    std::process::exit(duetsim::cli::main());
}
