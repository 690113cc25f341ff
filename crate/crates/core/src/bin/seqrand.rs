fn main() {
    std::process::exit(seqrand::cli::main_with_args(std::env::args_os()));
}
