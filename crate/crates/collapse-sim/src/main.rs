use clap::Parser;

fn main() {
    let cli = collapse_sim::cli::Cli::parse();
    std::process::exit(collapse_sim::cli::run(cli));
}
