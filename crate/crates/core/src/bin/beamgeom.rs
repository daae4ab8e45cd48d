use clap::Parser;

fn main() {
    let cli = beamgeom::cli::Cli::parse();
    std::process::exit(beamgeom::cli::main_with(cli));
}
