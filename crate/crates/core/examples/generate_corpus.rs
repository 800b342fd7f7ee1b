//! Writes a small procedural corpus to a directory and reads it back.
//!
//! cargo run --release --example generate_corpus -- /tmp/corpus

use meta3dseg::data::{Dataset, Role, Split, SyntheticKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "corpus".into());
    let kinds = [
        (SyntheticKind::Barbell, Role::Base),
        (SyntheticKind::Table, Role::Base),
        (SyntheticKind::Lamp, Role::Base),
        (SyntheticKind::Mug, Role::Novel),
    ];
    let ds = Dataset::synthetic(&kinds, 8, 2, 512, 0);
    std::fs::create_dir_all(&out)?;
    let manifest = ds.write(out.as_ref())?;

    let back = Dataset::load(&manifest)?;
    println!("manifest: {}", manifest.display());
    for (name, info) in back.categories() {
        let train = back.split(name, Split::Train).len();
        let test = back.split(name, Split::Test).len();
        println!(
            "{name:8} {:?} parts {:?}: {train} train, {test} test",
            info.role, info.schema.parts
        );
    }
    Ok(())
}
