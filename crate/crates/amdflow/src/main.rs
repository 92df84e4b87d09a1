use clap::Parser;

fn main() {
    amdflow::cli::init_logging();
    let cli = amdflow::cli::Cli::parse();
    std::process::exit(amdflow::cli::execute(cli.command));
}
