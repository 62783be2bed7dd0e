//! Writes the synthetic boundary panel used in the README walkthrough.
//!
//! `cargo run -p imaudit-core --example write_fixture -- <dir> [seed] [--clean]`

use std::path::PathBuf;

use imaudit::pipeline::fixtures::BoundaryPanel;

fn main() -> std::io::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(args.first().map_or("fixtures/synthetic", String::as_str));
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let inject = !args.iter().any(|a| a == "--clean");
    std::fs::create_dir_all(&dir)?;
    let config = BoundaryPanel::new(seed, inject).write_to(&dir)?;
    println!("wrote {}", config.display());
    Ok(())
}
