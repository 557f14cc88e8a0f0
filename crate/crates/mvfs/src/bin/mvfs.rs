fn main() {
    mvfs::cli::init_logging();
    std::process::exit(mvfs::cli::run(std::env::args_os()));
}
