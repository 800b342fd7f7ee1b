//! Trains modes A, B, C and D on the same corpus and seed and compares
//! novel-category mIoU at 1, 5 and 10 shots.
//!
//! cargo run --release --example ablation -- [episodes] [seeds] [beta]

use meta3dseg::data::{Dataset, Role, SyntheticKind};
use meta3dseg::train::{meta_test, meta_train, Mode, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let episodes: usize = args.next().map_or(Ok(60), |a| a.parse())?;
    let seeds: u64 = args.next().map_or(Ok(1), |a| a.parse())?;
    let beta: f64 = args.next().map_or(Ok(0.0), |a| a.parse())?;

    let ds = Dataset::synthetic(
        &[
            (SyntheticKind::Barbell, Role::Base),
            (SyntheticKind::Table, Role::Base),
            (SyntheticKind::Lamp, Role::Base),
            (SyntheticKind::Mug, Role::Novel),
        ],
        20,
        10,
        512,
        11,
    );
    println!("seed mode  1-shot  5-shot 10-shot");
    for seed in 0..seeds {
        for mode in Mode::ALL {
            let cfg = RunConfig {
                mode,
                seed,
                episodes,
                pretrain_steps: episodes,
                beta,
                eval_tasks: 3,
                ..RunConfig::default()
            };
            let trained = meta_train(&ds, &cfg)?;
            let scores =
                [1, 5, 10].map(|k| meta_test(&ds, &trained.model, &cfg, k).map(|r| r.mean_miou));
            let [a, b, c] = scores;
            println!("{seed:4} {mode:4} {:7.4} {:7.4} {:7.4}", a?, b?, c?);
        }
    }
    Ok(())
}
