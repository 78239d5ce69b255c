fn main() {
    std::process::exit(mpsuq::cli::run(std::env::args_os()));
}
