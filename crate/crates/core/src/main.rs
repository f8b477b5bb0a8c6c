use clap::Parser;

fn main() {
    let cli = mason::cli::Cli::parse();
    if let Err(e) = mason::cli::run(cli) {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(1);
    }
}
