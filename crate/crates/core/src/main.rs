fn main() {
    std::process::exit(tdnf::cli::run(std::env::args_os()));
}
