use clap::Parser;

fn main() {
    let cli = auxseg::cli::Cli::parse();
    if let Err(err) = auxseg::cli::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
