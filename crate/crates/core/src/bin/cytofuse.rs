fn main() {
    std::process::exit(cytofuse::cli::main(std::env::args_os()));
}
