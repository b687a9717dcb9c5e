fn main() {
    std::process::exit(cohsim::cli::main_with(std::env::args_os()));
}
