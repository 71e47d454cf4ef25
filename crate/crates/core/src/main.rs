fn main() {
    std::process::exit(probekit::cli::run_from(std::env::args_os()));
}
