fn main() {
    std::process::exit(ltr::cli::run());
}
