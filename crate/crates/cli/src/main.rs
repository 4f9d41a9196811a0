fn main() {
    std::process::exit(panoepi_cli::run(std::env::args_os()));
}
