use clap::Parser;
use tracing_subscriber::EnvFilter;

use qcert_cli::{run, RunConfig};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cfg = RunConfig::parse();
    match run(&cfg) {
        Ok(out) => {
            print!("{}", out.summary);
            for a in &out.artifacts {
                println!("wrote {}", a.display());
            }
            std::process::exit(out.status.code());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.status.code());
        }
    }
}
