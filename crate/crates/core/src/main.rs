fn main() {
    std::process::exit(guider::cli::main_with_args(std::env::args_os().collect()));
}
