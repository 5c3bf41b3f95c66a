fn main() {
    std::process::exit(ftcl::cli::run(std::env::args_os()));
}
