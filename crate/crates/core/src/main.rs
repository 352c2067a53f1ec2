fn main() {
    std::process::exit(dmemm::cli::run(std::env::args_os()));
}
