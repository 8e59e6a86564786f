//! Writes the generated scene corpus: `make_corpus <out_dir> [count] [seed]`.

use std::path::PathBuf;

use cdasim::adversarial::{generate_corpus, SceneFile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().ok_or("usage: make_corpus <out_dir> [count] [seed]")?);
    let count: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2024);
    std::fs::create_dir_all(&out)?;
    for (i, scene) in generate_corpus(count, seed).iter().enumerate() {
        let name = format!("scene_{i:02}");
        let text = serde_json::to_string_pretty(&SceneFile::from_scene(name.clone(), scene))?;
        std::fs::write(out.join(format!("{name}.json")), text + "\n")?;
    }
    Ok(())
}
