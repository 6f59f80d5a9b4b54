fn main() {
    std::process::exit(gsc_harness::cli::run(std::env::args_os()));
}
