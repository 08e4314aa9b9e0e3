fn main() {
    std::process::exit(msdm_lab::cli::main_entry());
}
