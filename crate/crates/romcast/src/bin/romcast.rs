use std::io::Write;

fn main() {
    let mut stdout = std::io::stdout();
    if let Err(e) = romcast::cli::run(std::env::args(), &mut stdout) {
        let _ = writeln!(std::io::stderr(), "error: {}", e);
        std::process::exit(e.exit_code());
    }
}
