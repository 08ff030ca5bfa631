fn main() {
    std::process::exit(fewframe_cli::run(std::env::args_os().skip(1)));
}
