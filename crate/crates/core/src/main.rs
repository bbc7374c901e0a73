fn main() {
    std::process::exit(lrlf::cli::main());
}
