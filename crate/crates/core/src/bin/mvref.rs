fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(mvref::cli::run(&argv));
}
