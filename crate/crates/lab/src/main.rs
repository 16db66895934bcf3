fn main() {
    std::process::exit(simclr_lab::cli::run());
}
