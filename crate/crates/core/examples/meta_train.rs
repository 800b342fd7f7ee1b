//! Meta-trains mode D on a generated corpus, saves a checkpoint and the
//! training log, and reloads the checkpoint.
//!
//! cargo run --release --example meta_train -- [episodes] [out_dir]

use meta3dseg::checkpoint;
use meta3dseg::data::{Dataset, Role, SyntheticKind};
use meta3dseg::train::{meta_train, Mode, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let episodes: usize = args.next().map_or(Ok(40), |a| a.parse())?;
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "meta_train_out".into()));

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
        0,
    );
    let cfg = RunConfig {
        mode: Mode::D,
        episodes,
        pretrain_steps: episodes,
        ..RunConfig::default()
    };
    let trained = meta_train(&ds, &cfg)?;

    std::fs::create_dir_all(&out)?;
    checkpoint::save(&out.join("checkpoint.bin"), &trained.model)?;
    std::fs::write(out.join("train_log.csv"), trained.log.to_csv())?;
    std::fs::write(out.join("run.toml"), cfg.to_toml())?;

    for row in trained.log.rows.iter().step_by((episodes / 8).max(1)) {
        println!(
            "episode {:3}: support {:.4} -> {:.4}, query loss {:.4}, query mIoU {:.3}",
            row.episode,
            row.support_loss_first,
            row.support_loss_last,
            row.query_loss,
            row.query_miou
        );
    }
    if let Some((lead, trail)) = trained.log.query_loss_trend(5) {
        println!("query loss, first five {lead:.4}, last five {trail:.4}");
    }
    let back = checkpoint::load(&out.join("checkpoint.bin"))?;
    assert_eq!(back, trained.model);
    println!("checkpoint round-trips; written to {}", out.display());
    Ok(())
}
