fn main() {
    if let Err(err) = osteoforge::cli::run(std::env::args_os()) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
