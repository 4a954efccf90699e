fn main() {
    std::process::exit(agmm_cli::run(std::env::args_os()));
}
