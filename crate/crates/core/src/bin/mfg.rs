fn main() {
    let code = lqmfg::cli::run(std::env::args().skip(1));
    std::process::exit(code);
}
