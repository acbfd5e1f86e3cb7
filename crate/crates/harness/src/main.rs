fn main() {
    std::process::exit(filterlab::cli::cli_main(std::env::args_os()));
}
