fn main() {
    std::process::exit(pulsar::cli::main());
}
