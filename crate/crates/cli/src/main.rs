fn main() {
    std::process::exit(lgbpn_cli::dispatch(std::env::args_os()));
}
