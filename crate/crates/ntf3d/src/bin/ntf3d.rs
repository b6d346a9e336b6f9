use clap::Parser;

fn main() {
    let cli = ntf3d::cli::Cli::parse();
    std::process::exit(ntf3d::cli::run(cli));
}
