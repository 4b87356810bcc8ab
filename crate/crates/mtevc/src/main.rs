fn main() {
    std::process::exit(mtevc::cli::run(std::env::args_os()));
}
