fn main() {
    std::process::exit(blendsched::cli::main_entry());
}
