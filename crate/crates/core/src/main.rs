fn main() {
    std::process::exit(retrace_core::cli::main_with_args(std::env::args_os()));
}
