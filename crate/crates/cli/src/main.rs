fn main() {
    std::process::exit(ridgematch_cli::run(std::env::args_os()));
}
