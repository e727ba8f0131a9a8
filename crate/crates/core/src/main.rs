fn main() {
    std::process::exit(mcot::cli::dispatch(std::env::args().skip(1)));
}
