fn main() {
    std::process::exit(ctckit::cli::cli_main(std::env::args_os()));
}
