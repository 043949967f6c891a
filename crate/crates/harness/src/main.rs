use clap::Parser;

fn main() {
    let cli = peft_harness::cli::Cli::parse();
    match peft_harness::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
