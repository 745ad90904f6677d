fn main() {
    std::process::exit(planemorph::cli::main_with(std::env::args_os()));
}
