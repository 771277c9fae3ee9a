use clap::Parser;
use tfapprox::cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("tfapprox {}: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
