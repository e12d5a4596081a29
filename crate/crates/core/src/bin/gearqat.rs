fn main() {
    std::process::exit(gearqat::cli::run(std::env::args_os()));
}
