fn main() {
    std::process::exit(noisy_sep::cli::run(std::env::args_os()));
}
