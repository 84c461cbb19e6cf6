fn main() {
    std::process::exit(invenc::cli_main());
}
