fn main() {
    std::process::exit(shkflow::cli::parse_and_dispatch(std::env::args()));
}
