//! Writes the synthetic fixture graphs as JSON.
//!
//! `cargo run -p parallax-core --example gen_fixtures [-- OUT_DIR]`

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    std::fs::create_dir_all(&dir)?;
    for (name, doc) in parallax_core::synth::fixtures() {
        let path = dir.join(format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(&doc).expect("documents serialize");
        text.push('\n');
        std::fs::write(&path, text)?;
        println!("{} ({} nodes)", path.display(), doc.nodes.len());
    }
    Ok(())
}
