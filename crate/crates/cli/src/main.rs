fn main() {
    std::process::exit(metafl_cli::main_with(std::env::args_os()));
}
