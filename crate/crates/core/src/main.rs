use clap::Parser;

fn main() {
    let args = qfeedback::cli::Args::parse();
    std::process::exit(qfeedback::cli::main_with(&args));
}
