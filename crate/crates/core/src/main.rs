use clap::Parser;

fn main() {
    let cli = w2s_lab::cli::Cli::parse();
    if let Err(e) = w2s_lab::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
