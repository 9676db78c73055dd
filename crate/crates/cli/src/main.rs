use clap::Parser;
use lsp_cli::args::Cli;

fn main() {
    match lsp_cli::run(Cli::parse()) {
        Ok(outcome) => {
            for f in &outcome.manifest.outputs {
                println!("{:<14} {}", f.role, f.path.display());
            }
            println!("manifest       {}", outcome.manifest_path.display());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
