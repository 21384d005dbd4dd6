fn main() {
    std::process::exit(dp_filters_cli::run(std::env::args_os()));
}
