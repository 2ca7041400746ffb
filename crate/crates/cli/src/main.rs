fn main() {
    std::process::exit(poincare_lab_cli::run(std::env::args_os()));
}
