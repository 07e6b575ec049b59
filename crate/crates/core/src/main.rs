use clap::Parser;

fn main() {
    let cli = gmfc_core::cli::Cli::parse();
    let code = gmfc_core::cli::run(&cli, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
