fn main() {
    if let Err(e) = discgen::cli::run(std::env::args_os()) {
        eprintln!("{}", discgen::cli::error_line(&e));
        std::process::exit(1);
    }
}
