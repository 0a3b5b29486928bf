fn main() {
    std::process::exit(eqptr::cli::main_from(std::env::args_os()));
}
