fn main() {
    std::process::exit(bwrfn::cli::main_with_args(std::env::args_os()));
}
