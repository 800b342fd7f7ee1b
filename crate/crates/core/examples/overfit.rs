//! Fits the segmenter to a single shape of each synthetic kind.
//!
//! cargo run --release --example overfit

use meta3dseg::data::{build_episode, Dataset, EpisodeSpec, Role, SyntheticKind};
use meta3dseg::psl::{argmax_rows, predict, ParamBundle};
use meta3dseg::train::{inner_adapt, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default();
    for (i, kind) in SyntheticKind::ALL.into_iter().enumerate() {
        let ds = Dataset::synthetic(&[(kind, Role::Base)], 1, 1, 512, i as u64);
        let spec = EpisodeSpec {
            n_way: 1,
            k_shot: 1,
            points: cfg.points,
            query_limit: Some(1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
        let ep = build_episode(&ds, &ds.with_role(Role::Base), &spec, &mut rng)?;
        let bundle = ParamBundle::init(cfg.layers.clone(), &mut rng);
        let adapted = inner_adapt(&ep.support, &bundle, 200, 1e-3)?;

        let fitted = ParamBundle {
            theta_t: adapted.theta_t,
            ..bundle
        };
        let shape = &ep.support[0];
        let pred = argmax_rows(&predict(&shape.coords(), &fitted)?.logits);
        let hits = pred
            .iter()
            .zip(&shape.targets)
            .filter(|(p, t)| p == t)
            .count();
        let curve: Vec<String> = adapted
            .losses
            .iter()
            .step_by(50)
            .map(|l| format!("{l:.3}"))
            .collect();
        println!(
            "{:8} loss {} -> {:.4}, point accuracy {:.3}",
            kind.to_string(),
            curve.join(" "),
            adapted.losses.last().unwrap(),
            hits as f64 / pred.len() as f64
        );
    }
    Ok(())
}
