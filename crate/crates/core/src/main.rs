fn main() {
    std::process::exit(patchfit::io::cli::run(std::env::args_os()));
}
