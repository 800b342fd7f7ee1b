//! Reverse-mode gradients of the segmenter's loss against central
//! differences.
//!
//! cargo run --release --example gradient_check

use meta3dseg::data::{build_episode, Dataset, EpisodeSpec, Role, SyntheticKind};
use meta3dseg::psl::{
    layer_leaves, mean_loss, overlay, tensors, LayerNodes, LayerPlan, ParamBundle,
};
use meta3dseg::tensor::{finite_diff_check, GradCheck, NodeId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plan = LayerPlan {
        g1: vec![16, 32],
        g2: vec![32],
        classes: 3,
    };
    let ds = Dataset::synthetic(&[(SyntheticKind::Table, Role::Base)], 2, 1, 256, 1);
    let spec = EpisodeSpec {
        n_way: 1,
        k_shot: 1,
        points: 64,
        query_limit: Some(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ep = build_episode(&ds, &ds.with_role(Role::Base), &spec, &mut rng)?;
    let bundle = ParamBundle::init(plan.clone(), &mut rng);
    let params: Vec<_> = tensors(&bundle.theta_t).into_iter().cloned().collect();

    let report = finite_diff_check(
        |g, ids: &[NodeId]| {
            let t: Vec<LayerNodes> = ids
                .chunks(2)
                .map(|w| LayerNodes {
                    weight: w[0],
                    bias: w[1],
                })
                .collect();
            let m = layer_leaves(g, &bundle.theta_m, false);
            let layers = overlay(g, &t, &m)?;
            mean_loss(g, &plan, &layers, &ep.support)
        },
        &params,
        &GradCheck {
            coords_per_param: Some(20),
            ..GradCheck::default()
        },
    )?;
    for (i, e) in report.per_param.iter().enumerate() {
        println!("tensor {i:2}: worst relative error {e:.2e}");
    }
    println!(
        "{} coordinates checked, {} skipped at relu/maxpool kinks, max {:.2e}",
        report.checked, report.skipped_kinks, report.max_rel_error
    );
    Ok(())
}
