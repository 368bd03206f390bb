fn main() { ctta::cli::main_entry() }
