fn main() {
    std::process::exit(rotmvps::cli::main_entry());
}
