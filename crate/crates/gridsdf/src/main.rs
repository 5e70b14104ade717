fn main() {
    if let Err(e) = gridsdf::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
