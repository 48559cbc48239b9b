fn main() {
    std::process::exit(ecohabit_cli::run(std::env::args_os()));
}
