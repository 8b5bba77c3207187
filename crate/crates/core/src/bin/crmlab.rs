fn main() {
    std::process::exit(crmlab::cli::run(std::env::args_os()));
}
