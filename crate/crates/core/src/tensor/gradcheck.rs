//! Central finite differences against reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Perturbation for `(f(p + h) − f(p − h)) / 2h`.
    pub h: f64,
    /// Coordinates probed per parameter tensor; `None` probes all of them.
    pub coords_per_param: Option<usize>,
    /// Lower bound on the relative-error denominator
    /// `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords_per_param: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h probes crossed a relu or maxpool branch and were
    /// therefore not compared.
    pub skipped_kinks: usize,
}

/// Compares `backward` of the scalar built by `f` against central
/// differences, one parameter coordinate at a time.
///
/// `f` receives a fresh graph and the leaf ids of `params` (in order). The
/// objective is the sum of the entries of the node it returns. Differences
/// are taken entry by entry before summing, so a large term with a small
/// gradient does not drown the others in roundoff. `f` is evaluated
/// `1 + 2·coords` times, so any randomness it uses has to be fixed outside
/// the closure.
pub fn finite_diff_check<F, E>(
    f: F,
    params: &[Tensor],
    cfg: &GradCheck,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, E>,
    E: From<TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, NodeId, Vec<NodeId>), E> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let root = f(&mut g, &ids)?;
        Ok((g, root, ids))
    };

    let (mut graph, root, ids) = eval(params)?;
    let base_signature = graph.kink_signature();
    let total = if graph.value(root).len() == 1 {
        root
    } else {
        graph.sum(root)?
    };
    let grads = graph.backward(total)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.get_or_zeros(id, &graph))
        .collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = params.to_vec();

    for (pi, param) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.coords_per_param {
            Some(k) if k < param.len() => sample(&mut rng, param.len(), k).into_vec(),
            _ => (0..param.len()).collect(),
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let original = param.data()[c];
            work[pi].data_mut()[c] = original + cfg.h;
            let (gp, rp, _) = eval(&work)?;
            work[pi].data_mut()[c] = original - cfg.h;
            let (gm, rm, _) = eval(&work)?;
            work[pi].data_mut()[c] = original;

            if gp.kink_signature() != base_signature || gm.kink_signature() != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let diff: f64 = gp
                .value(rp)
                .data()
                .iter()
                .zip(gm.value(rm).data())
                .map(|(p, m)| p - m)
                .sum();
            let numeric = diff / (2.0 * cfg.h);
            let a = analytic[pi].data()[c];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
        report.per_param.push(worst);
        report.max_rel_error = report.max_rel_error.max(worst);
    }
    Ok(report)
}
