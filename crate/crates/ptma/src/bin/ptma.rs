fn main() {
    std::process::exit(ptma::cli::dispatch(std::env::args().skip(1).collect()));
}
