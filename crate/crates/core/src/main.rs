fn main() {
    std::process::exit(monoimpute::cli::main());
}
