fn main() {
    std::process::exit(prefpoe::run_cli());
}
