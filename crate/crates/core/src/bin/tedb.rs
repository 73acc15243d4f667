fn main() {
    std::process::exit(tedb::cli::main_with(std::env::args_os()));
}
