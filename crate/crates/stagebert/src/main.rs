fn main() {
    std::process::exit(stagebert::cli::run());
}
