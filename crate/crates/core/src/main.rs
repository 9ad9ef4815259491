fn main() {
    std::process::exit(eedmn::cli::main_with(std::env::args_os()));
}
