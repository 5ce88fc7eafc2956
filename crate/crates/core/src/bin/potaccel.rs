fn main() {
    std::process::exit(potaccel::cli::main());
}
