fn main() {
    std::process::exit(stackelberg_hinf::cli::run(std::env::args_os()));
}
