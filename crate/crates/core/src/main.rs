fn main() {
    std::process::exit(tactfunc::cli::run(std::env::args_os()));
}
