use clap::Parser;

fn main() {
    let cli = d2c::cli::Cli::parse();
    if let Err(e) = d2c::cli::run(cli) {
        eprintln!("{}", e.machine_line());
        std::process::exit(e.exit_code());
    }
}
