fn main() {
    std::process::exit(slotmil_cli::run(std::env::args_os()));
}
