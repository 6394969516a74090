fn main() {
    std::process::exit(stagematte_cli::run(std::env::args_os()));
}
