use clap::Parser;

fn main() {
    let cli = edgecell::Cli::parse();
    if let Err(e) = edgecell::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
