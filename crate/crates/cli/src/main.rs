fn main() {
    std::process::exit(rvbatch_cli::main_with_args(std::env::args_os()));
}
