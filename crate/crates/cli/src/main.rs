fn main() {
    std::process::exit(vader::run(std::env::args_os()));
}
