fn main() {
    std::process::exit(anssel::cli::run(std::env::args_os()));
}
