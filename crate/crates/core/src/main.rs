fn main() {
    std::process::exit(wdro::cli::main_with_args(std::env::args_os()));
}
