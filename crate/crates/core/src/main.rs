fn main() {
    vreg::cli::init_logging();
    std::process::exit(vreg::cli::run(std::env::args_os()));
}
