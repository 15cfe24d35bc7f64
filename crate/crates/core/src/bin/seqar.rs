fn main() {
    std::process::exit(seqar::cli::main_with_args(std::env::args()));
}
