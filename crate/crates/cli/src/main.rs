fn main() {
    std::process::exit(xmfnet_cli::run(std::env::args_os()));
}
