use clap::Parser;

fn main() {
    let cli = cdlab::Cli::parse();
    std::process::exit(cdlab::main_with(cli));
}
