//! One pass of the meta learner: support features, part scores, task
//! embedding, weight distribution and a sampled overlay.
//!
//! cargo run --release --example meta_overlay

use meta3dseg::data::{build_episode, Dataset, EpisodeSpec, Role, SyntheticKind};
use meta3dseg::meta::{
    kl_to_standard_normal, overlays_from_flat, part_score, part_specific_feature, sample_theta_m,
    task_embed, vae_heads, MetaState,
};
use meta3dseg::psl::{predict, ParamBundle};
use meta3dseg::train::{bootstrap_features, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default();
    let ds = Dataset::synthetic(&[(SyntheticKind::Lamp, Role::Base)], 3, 1, 512, 4);
    let spec = EpisodeSpec {
        n_way: 1,
        k_shot: 2,
        points: cfg.points,
        query_limit: Some(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ep = build_episode(&ds, &ds.with_role(Role::Base), &spec, &mut rng)?;
    let bundle = ParamBundle::init(cfg.layers.clone(), &mut rng);
    let meta = MetaState::init(cfg.meta.clone(), &cfg.layers, &mut rng);

    let boot = bootstrap_features(&ep.support, &bundle)?;
    println!(
        "support: {} points, descriptor width {}, mean loss {:.4}",
        boot.losses.len(),
        boot.descriptor.cols(),
        boot.losses.data().iter().sum::<f64>() / boot.losses.len() as f64
    );
    let lambda = part_score(&boot.descriptor, &meta)?;
    let (lo, hi) = lambda
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    println!("part scores in [{lo:.4}, {hi:.4}]");

    let s_x = part_specific_feature(&lambda, &boot.logit_grads, &boot.losses)?;
    let emb = task_embed(&s_x, &meta)?;
    let heads = vae_heads(&emb, &meta)?;
    println!(
        "task embedding width {}, {} head outputs, KL to N(0, I) {:.1}",
        emb.pooled.len(),
        heads.total_len(),
        kl_to_standard_normal(&heads)
    );

    let theta = sample_theta_m(&heads, &mut rng)?;
    let overlaid = bundle.with_theta_m(overlays_from_flat(&cfg.layers, &theta)?)?;
    let cloud = ep.query[0].coords();
    let before = predict(&cloud, &bundle)?.logits;
    let after = predict(&cloud, &overlaid)?.logits;
    let shift = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("largest logit change from the sampled overlay: {shift:.4}");
    Ok(())
}
