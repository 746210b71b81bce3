fn main() {
    std::process::exit(automap_ct::cli::main_with_args(std::env::args_os()));
}
