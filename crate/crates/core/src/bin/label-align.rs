fn main() {
    std::process::exit(label_align::cli::run(std::env::args_os()));
}
