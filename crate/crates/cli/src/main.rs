fn main() {
    match tcemnet_cli::run(std::env::args_os()) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error_code={} {e}", e.code());
            std::process::exit(e.exit_status());
        }
    }
}
