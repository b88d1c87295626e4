fn main() {
    std::process::exit(dasg::cli::main_with_args(std::env::args_os()));
}
