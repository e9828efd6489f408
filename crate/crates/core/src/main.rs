fn main() {
    std::process::exit(nightprompt::cli::run(std::env::args_os()));
}
