fn main() {
    std::process::exit(sovereign_uwb::cli::main());
}
