//! Meta-tests a short mode-D run on the novel category and writes a
//! per-point segmentation of one of its shapes.
//!
//! cargo run --release --example evaluate_and_export -- [out_file]

use std::fmt::Write as _;

use meta3dseg::data::{Dataset, LabelMap, Role, SyntheticKind};
use meta3dseg::psl::{argmax_rows, predict};
use meta3dseg::train::{adapt_to_category, meta_test, meta_train, Mode, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "mug_segmentation.txt".into());
    let ds = Dataset::synthetic(
        &[
            (SyntheticKind::Barbell, Role::Base),
            (SyntheticKind::Table, Role::Base),
            (SyntheticKind::Lamp, Role::Base),
            (SyntheticKind::Mug, Role::Novel),
        ],
        12,
        4,
        512,
        3,
    );
    let cfg = RunConfig {
        mode: Mode::D,
        episodes: 30,
        pretrain_steps: 30,
        eval_tasks: 2,
        beta: 0.0,
        ..RunConfig::default()
    };
    let trained = meta_train(&ds, &cfg)?;
    for k in [1, 5] {
        let report = meta_test(&ds, &trained.model, &cfg, k)?;
        println!("{k}-shot");
        print!("{}", report.summary());
    }

    // adapt on five support shapes, then label a query shape
    let (bundle, episode) = adapt_to_category(&ds, &trained.model, &cfg, "mug", 5, 0)?;
    let shape = &episode.query[0];
    let schema = &ds.category("mug").expect("mug is in the corpus").schema;
    let map = LabelMap::from_parts(schema.parts.iter().copied());
    let labels = argmax_rows(&predict(&shape.coords(), &bundle)?.logits);
    let mut text = String::new();
    for (p, d) in shape.cloud.points.iter().zip(labels) {
        let label = map.to_global(d).unwrap_or(schema.parts[0]);
        writeln!(text, "{} {} {} {label}", p[0], p[1], p[2])?;
    }
    std::fs::write(&out, text)?;
    println!("wrote {} labelled points to {out}", shape.len());
    Ok(())
}
