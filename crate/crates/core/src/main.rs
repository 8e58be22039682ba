fn main() {
    std::process::exit(vqd_probe::cli::run(std::env::args_os()));
}
