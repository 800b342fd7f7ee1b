//! Inner adaptation, meta-training steps, meta-training and meta-testing.
//!
//! The outer gradient is first order: the query loss is evaluated at the
//! adapted segmenter weights, which enter the graph as leaves, plus the
//! predicted overlay, which stays connected to the meta parameters. The
//! inner optimizer steps themselves are not differentiated. The bootstrap
//! pass feeding the meta learner is, so at `T = 0` the gradient is exact.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::log::LogRow;
use super::{Mode, RunConfig, TrainError, TrainLog};
use crate::data::{
    build_episode, Dataset, Episode, EpisodeShape, EpisodeSpec, LabelMap, Role, SetRole, Split,
};
use crate::meta::{
    draw_noise, meta_forward, meta_forward_nodes, overlay_nodes, overlays_from_flat,
    stack_point_features, MetaForward, MetaNodes, MetaState,
};
use crate::metrics::{aggregate, SegReport, ShapeScore, NO_PART};
use crate::psl::{
    argmax_rows, forward, layer_leaves, mean_loss, mean_loss_with_logits, overlay, predict,
    tensors, tensors_mut, LayerNodes, LayerParams, LayerPlan, ParamBundle,
};
use crate::tensor::{Graph, NodeId, Optimizer, Tensor, TensorError};

// Independent random streams derived from the run seed.
const INIT: u64 = 1;
const PRETRAIN: u64 = 2;
const EPISODE: u64 = 3;
const NOISE: u64 = 4;
const TEST: u64 = 5;
const TEST_NOISE: u64 = 6;
const EXPORT: u64 = 7;

pub(crate) fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}

/// Everything a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mode: Mode,
    /// Segmenter initialization; `theta_m` is kept at zero.
    pub bundle: ParamBundle,
    /// Absent in mode A.
    pub meta: Option<MetaState>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub log: TrainLog,
}

/// Support-set inputs of the meta learner, rows concatenated over shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportFeatures {
    /// `N_sup × (2m + 3)`
    pub descriptor: Tensor,
    /// `N_sup × c`
    pub logit_grads: Tensor,
    /// `N_sup`
    pub losses: Tensor,
}

impl SupportFeatures {
    /// `[∇_x, l_x]` rows.
    pub fn point_features(&self) -> Tensor {
        stack_point_features(&self.logit_grads, &self.losses).expect("consistent bootstrap shapes")
    }
}

/// Bootstrap outputs as graph nodes, rows concatenated over shapes.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapNodes {
    pub descriptor: NodeId,
    pub logit_grads: NodeId,
    pub losses: NodeId,
    /// `[∇_x, l_x]` rows.
    pub point_features: NodeId,
}

fn stack_rows(g: &mut Graph, parts: &[NodeId], cols: usize) -> Result<NodeId, TensorError> {
    if let [one] = parts {
        return Ok(*one);
    }
    let rows: usize = parts.iter().map(|&p| g.value(p).rows()).sum();
    let flat = g.concat_flat(parts)?;
    g.reshape(flat, &[rows, cols])
}

/// One segmenter pass over the support set with weights `theta_t` and no
/// overlay, kept differentiable in `theta_t`.
pub fn bootstrap_nodes(
    g: &mut Graph,
    plan: &LayerPlan,
    theta_t: &[LayerNodes],
    support: &[EpisodeShape],
) -> Result<BootstrapNodes, TrainError> {
    guard_support(support)?;
    let mut desc = Vec::with_capacity(support.len());
    let mut grads = Vec::with_capacity(support.len());
    let mut losses = Vec::with_capacity(support.len());
    for s in support {
        let pts = g.constant(s.coords());
        let fwd = forward(g, plan, theta_t, pts)?;
        let ce = g.softmax_cross_entropy(fwd.logits, &s.targets)?;
        desc.push(fwd.descriptor);
        grads.push(g.ce_logit_grad(ce)?);
        losses.push(ce);
    }
    let descriptor = stack_rows(g, &desc, plan.descriptor_width())?;
    let logit_grads = stack_rows(g, &grads, plan.classes)?;
    let losses = if let [one] = losses[..] {
        one
    } else {
        g.concat_flat(&losses)?
    };
    let n = g.value(losses).len();
    let column = g.reshape(losses, &[n, 1])?;
    let point_features = g.concat_cols(&[logit_grads, column])?;
    Ok(BootstrapNodes {
        descriptor,
        logit_grads,
        losses,
        point_features,
    })
}

/// One segmenter pass over the support set with a zero overlay.
pub fn bootstrap_features(
    support: &[EpisodeShape],
    bundle: &ParamBundle,
) -> Result<SupportFeatures, TrainError> {
    let mut g = Graph::new();
    let t = layer_leaves(&mut g, &bundle.theta_t, false);
    let b = bootstrap_nodes(&mut g, &bundle.plan, &t, support)?;
    Ok(SupportFeatures {
        descriptor: g.value(b.descriptor).clone(),
        logit_grads: g.value(b.logit_grads).clone(),
        losses: g.value(b.losses).clone(),
    })
}

fn guard_support(shapes: &[EpisodeShape]) -> Result<(), TrainError> {
    if shapes.iter().any(|s| s.role == SetRole::Query) {
        return Err(TrainError::QueryLeak);
    }
    if shapes.is_empty() {
        return Err(TrainError::Config("empty support set".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub theta_t: Vec<LayerParams>,
    /// Support loss before each step and after the last (`T + 1` values).
    pub losses: Vec<f64>,
}

/// `T` full-batch Adam steps on the support set, updating `theta_t` only.
pub fn inner_adapt(
    support: &[EpisodeShape],
    bundle: &ParamBundle,
    steps: usize,
    lr: f64,
) -> Result<Adapted, TrainError> {
    guard_support(support)?;
    let mut theta = bundle.theta_t.clone();
    let mut opt = Optimizer::adam(lr)?;
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let t = layer_leaves(&mut g, &theta, true);
        let m = layer_leaves(&mut g, &bundle.theta_m, false);
        let layers = overlay(&mut g, &t, &m)?;
        let loss = mean_loss(&mut g, &bundle.plan, &layers, support)?;
        losses.push(g.value(loss).item());
        if step == steps {
            break;
        }
        let grads = g.backward(loss)?;
        let ids: Vec<_> = t.iter().flat_map(|l| [l.weight, l.bias]).collect();
        let grads: Vec<Tensor> = ids.iter().map(|&id| grads.get_or_zeros(id, &g)).collect();
        opt.step(tensors_mut(&mut theta), &grads)?;
    }
    Ok(Adapted {
        theta_t: theta,
        losses,
    })
}

/// Outer gradients and the log row of one meta-training episode.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// In [`MetaState::tensors`] order.
    pub meta_grads: Vec<Tensor>,
    /// First-order gradient for the segmenter initialization.
    pub theta_t_grads: Vec<Tensor>,
    pub query_loss: f64,
    pub kl: Option<f64>,
    pub row: LogRow,
}

/// Predicted overlay for `support`; `noise_rng` feeds the sampler when the
/// mode samples. Averages `samples` draws.
pub fn predict_overlay<R: Rng>(
    support: &[EpisodeShape],
    bundle: &ParamBundle,
    meta: &MetaState,
    mode: Mode,
    samples: usize,
    noise_rng: &mut R,
) -> Result<Vec<LayerParams>, TrainError> {
    let features = mode
        .features()
        .ok_or_else(|| TrainError::Mode("mode A has no overlay".into()))?;
    let boot = bootstrap_features(support, bundle)?;
    let pf = boot.point_features();
    let draws = if features.sample { samples.max(1) } else { 1 };
    let mut sum: Option<[Tensor; 3]> = None;
    for _ in 0..draws {
        let noise = features
            .sample
            .then(|| draw_noise(&meta.targets, noise_rng));
        let mut g = Graph::new();
        let nodes = MetaNodes::new(&mut g, meta, false);
        let fwd = meta_forward(
            &mut g,
            &nodes,
            features,
            &boot.descriptor,
            &pf,
            noise.as_ref(),
        )?;
        let theta = fwd.theta.map(|id| g.value(id).clone());
        sum = Some(match sum {
            None => theta,
            Some(acc) => {
                let mut out = acc;
                for i in 0..3 {
                    out[i] = out[i].add(&theta[i])?;
                }
                out
            }
        });
    }
    let mut theta = sum.expect("at least one draw");
    if draws > 1 {
        let inv = 1.0 / draws as f64;
        theta = theta.map(|t| t.map(|v| v * inv));
    }
    Ok(overlays_from_flat(&bundle.plan, &theta)?)
}

/// Node ids of the outer objective.
#[derive(Debug, Clone)]
pub struct OuterNodes {
    /// `query + β·KL` (just `query` without a KL term).
    pub root: NodeId,
    pub query: NodeId,
    pub logits: Vec<NodeId>,
}

/// Mean query cross-entropy of `theta_t ⊕ overlay`, plus `β·KL` when the
/// meta pass computed one.
pub fn outer_objective(
    g: &mut Graph,
    plan: &LayerPlan,
    theta_t: &[LayerNodes],
    fwd: &MetaForward,
    query: &[EpisodeShape],
    beta: f64,
) -> Result<OuterNodes, TensorError> {
    let m = overlay_nodes(g, plan, &fwd.theta)?;
    let layers = overlay(g, theta_t, &m)?;
    let (loss, logits) = mean_loss_with_logits(g, plan, &layers, query)?;
    let root = match fwd.kl {
        Some(kl) => {
            let weighted = g.scale(kl, beta)?;
            g.add(loss, weighted)?
        }
        None => loss,
    };
    Ok(OuterNodes {
        root,
        query: loss,
        logits,
    })
}

/// One meta-training episode.
pub fn meta_train_step<R: Rng>(
    dataset: &Dataset,
    episode: &Episode,
    bundle: &ParamBundle,
    meta: &MetaState,
    cfg: &RunConfig,
    index: usize,
    noise_rng: &mut R,
) -> Result<StepOutcome, TrainError> {
    let start = Instant::now();
    let features = cfg
        .mode
        .features()
        .ok_or_else(|| TrainError::Mode("mode A has no meta-training step".into()))?;
    let plan = &bundle.plan;
    let noise = features
        .sample
        .then(|| draw_noise(&meta.targets, noise_rng));

    let mut g = Graph::new();
    let nodes = MetaNodes::new(&mut g, meta, true);
    let init = layer_leaves(&mut g, &bundle.theta_t, true);
    let boot = bootstrap_nodes(&mut g, plan, &init, &episode.support)?;
    let fwd = meta_forward_nodes(
        &mut g,
        &nodes,
        features,
        boot.descriptor,
        boot.point_features,
        noise.as_ref(),
    )?;
    let theta_m = overlays_from_flat(plan, &fwd.theta.map(|id| g.value(id).clone()))?;

    let adapted = inner_adapt(
        &episode.support,
        &bundle.with_theta_m(theta_m)?,
        cfg.inner_steps,
        cfg.inner_lr,
    )?;

    let t = layer_leaves(&mut g, &adapted.theta_t, true);
    let outer = outer_objective(&mut g, plan, &t, &fwd, &episode.query, cfg.beta)?;
    let query_loss = g.value(outer.query).item();
    let kl = fwd.kl.map(|id| g.value(id).item());
    let logits = outer.logits;
    let grads = g.backward(outer.root)?;
    let meta_grads = nodes
        .ids()
        .iter()
        .map(|&id| grads.get_or_zeros(id, &g))
        .collect();
    // adapted weights and the bootstrap pass both depend on the initialization
    let theta_t_grads = t
        .iter()
        .zip(&init)
        .flat_map(|(a, b)| [(a.weight, b.weight), (a.bias, b.bias)])
        .map(|(a, b)| grads.get_or_zeros(a, &g).add(&grads.get_or_zeros(b, &g)))
        .collect::<Result<_, _>>()?;

    let logits: Vec<Tensor> = logits.iter().map(|&id| g.value(id).clone()).collect();
    let scores = score_shapes(dataset, episode, &episode.query, &logits)?;
    let query_miou = scores.iter().map(|s| s.miou).sum::<f64>() / scores.len() as f64;

    let row = LogRow {
        episode: index,
        support_loss_first: adapted.losses[0],
        support_loss_last: *adapted.losses.last().expect("T + 1 losses"),
        query_loss,
        query_miou,
        seconds: if cfg.log_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    Ok(StepOutcome {
        meta_grads,
        theta_t_grads,
        query_loss,
        kl,
        row,
    })
}

fn score_shapes(
    dataset: &Dataset,
    episode: &Episode,
    shapes: &[EpisodeShape],
    logits: &[Tensor],
) -> Result<Vec<ShapeScore>, TrainError> {
    shapes
        .iter()
        .zip(logits)
        .map(|(s, l)| score_one(dataset, &episode.label_map, s, l))
        .collect()
}

fn score_one(
    dataset: &Dataset,
    map: &LabelMap,
    shape: &EpisodeShape,
    logits: &Tensor,
) -> Result<ShapeScore, TrainError> {
    let name = &shape.cloud.category;
    let info = dataset
        .category(name)
        .ok_or_else(|| crate::data::DataError::UnknownCategory(name.clone()))?;
    let pred: Vec<usize> = argmax_rows(logits)
        .into_iter()
        .map(|d| map.to_global(d).unwrap_or(NO_PART))
        .collect();
    Ok(ShapeScore::evaluate(
        name,
        &pred,
        &shape.cloud.labels,
        &info.schema.parts,
    )?)
}

/// Plain supervised training on pooled base-category training shapes, each
/// labelled within its own category; returns the batch losses.
pub fn pretrain(
    dataset: &Dataset,
    bundle: &mut ParamBundle,
    cfg: &RunConfig,
) -> Result<Vec<f64>, TrainError> {
    let mut pool = Vec::new();
    for name in dataset.with_role(Role::Base) {
        let info = dataset.category(&name).expect("listed category");
        let map = LabelMap::from_parts(info.schema.parts.iter().copied());
        for rec in dataset.split(&name, Split::Train) {
            pool.push((&rec.cloud, map.clone()));
        }
    }
    if cfg.pretrain_steps > 0 && pool.is_empty() {
        return Err(TrainError::Config(
            "no base training shapes to pretrain on".into(),
        ));
    }
    let mut rng = stream(cfg.seed, PRETRAIN, 0);
    let mut opt = Optimizer::adam(cfg.pretrain_lr)?;
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    let zero = bundle.theta_m.clone();
    for _ in 0..cfg.pretrain_steps {
        let take = cfg.pretrain_batch.min(pool.len());
        let batch: Vec<EpisodeShape> = sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|i| {
                let (cloud, map) = &pool[i];
                let cloud = cloud.sample_points(cfg.points, rng.random()).normalize();
                EpisodeShape::new(cloud, map, SetRole::Support)
            })
            .collect::<Result<_, _>>()?;
        let mut g = Graph::new();
        let t = layer_leaves(&mut g, &bundle.theta_t, true);
        let m = layer_leaves(&mut g, &zero, false);
        let layers = overlay(&mut g, &t, &m)?;
        let loss = mean_loss(&mut g, &bundle.plan, &layers, &batch)?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = t
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .map(|id| grads.get_or_zeros(id, &g))
            .collect();
        opt.step(tensors_mut(&mut bundle.theta_t), &grads)?;
    }
    Ok(losses)
}

fn check_dataset(dataset: &Dataset, cfg: &RunConfig) -> Result<(), TrainError> {
    if dataset.max_parts() > cfg.layers.classes {
        return Err(TrainError::Config(format!(
            "layers.classes = {} but a category has {} parts",
            cfg.layers.classes,
            dataset.max_parts()
        )));
    }
    Ok(())
}

fn all_finite(ts: &[&Tensor]) -> bool {
    ts.iter().all(|t| t.is_finite())
}

/// Pretrains the segmenter, then (modes B–D) runs episodic meta-training on
/// the base categories.
pub fn meta_train(dataset: &Dataset, cfg: &RunConfig) -> Result<Trained, TrainError> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    let mut init = stream(cfg.seed, INIT, 0);
    let mut bundle = ParamBundle::init(cfg.layers.clone(), &mut init);
    let mut meta = cfg
        .mode
        .features()
        .map(|_| MetaState::init(cfg.meta.clone(), &cfg.layers, &mut init));

    let mut log = TrainLog {
        pretrain: pretrain(dataset, &mut bundle, cfg)?,
        ..TrainLog::default()
    };
    if !all_finite(&tensors(&bundle.theta_t)) {
        return Err(TrainError::NonFinite("pretrained weights".into()));
    }

    if let Some(meta) = meta.as_mut() {
        let base = dataset.with_role(Role::Base);
        let spec = EpisodeSpec {
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            points: cfg.points,
            query_limit: cfg.query_limit,
        };
        let mut meta_opt = Optimizer::adam(cfg.outer_lr)?;
        let mut init_opt = Optimizer::adam(cfg.outer_lr)?;
        let phase1 = cfg.phase1_episodes();
        for e in 0..cfg.total_episodes() {
            let episode = build_episode(
                dataset,
                &base,
                &spec,
                &mut stream(cfg.seed, EPISODE, e as u64),
            )?;
            let mut noise = stream(cfg.seed, NOISE, e as u64);
            let out = meta_train_step(dataset, &episode, &bundle, meta, cfg, e, &mut noise)?;
            if !out.query_loss.is_finite() {
                return Err(TrainError::NonFinite(format!("query loss in episode {e}")));
            }
            meta_opt.step(meta.tensors_mut(), &out.meta_grads)?;
            if e < phase1 {
                init_opt.step(tensors_mut(&mut bundle.theta_t), &out.theta_t_grads)?;
            }
            if !all_finite(&meta.tensors()) || !all_finite(&tensors(&bundle.theta_t)) {
                return Err(TrainError::NonFinite(format!(
                    "parameters after episode {e}"
                )));
            }
            log.rows.push(out.row);
        }
    }
    Ok(Trained {
        model: Model {
            mode: cfg.mode,
            bundle,
            meta,
        },
        log,
    })
}

/// Adapts to `shots`-shot episodes of every novel category and scores the
/// query shapes. The same tasks are drawn for every mode under one seed.
pub fn meta_test(
    dataset: &Dataset,
    model: &Model,
    cfg: &RunConfig,
    shots: usize,
) -> Result<SegReport, TrainError> {
    check_dataset(dataset, cfg)?;
    if model.bundle.plan != cfg.layers {
        return Err(TrainError::Config(
            "checkpoint layer plan differs from config".into(),
        ));
    }
    let novel = dataset.with_role(Role::Novel);
    if novel.is_empty() {
        return Err(TrainError::Config("manifest has no novel category".into()));
    }
    let spec = EpisodeSpec {
        n_way: 1,
        k_shot: shots,
        points: cfg.points,
        query_limit: cfg.query_limit,
    };
    let mut scores = Vec::new();
    for (ci, name) in novel.iter().enumerate() {
        for t in 0..cfg.eval_tasks {
            let index = ((ci as u64) << 24) | t as u64;
            let episode = build_episode(
                dataset,
                std::slice::from_ref(name),
                &spec,
                &mut stream(cfg.seed, TEST, index),
            )?;
            scores.extend(evaluate_episode(
                dataset,
                &episode,
                model,
                cfg,
                &mut stream(cfg.seed, TEST_NOISE, index),
            )?);
        }
    }
    Ok(aggregate(scores)?)
}

/// Overlay prediction, adaptation on the support set, query scoring.
pub fn evaluate_episode<R: Rng>(
    dataset: &Dataset,
    episode: &Episode,
    model: &Model,
    cfg: &RunConfig,
    noise_rng: &mut R,
) -> Result<Vec<ShapeScore>, TrainError> {
    let adapted = adapt_model(&episode.support, model, cfg, noise_rng)?;
    let logits: Vec<Tensor> = episode
        .query
        .iter()
        .map(|s| predict(&s.coords(), &adapted).map(|o| o.logits))
        .collect::<Result<_, _>>()?;
    score_shapes(dataset, episode, &episode.query, &logits)
}

/// Draws support draw `task` of `category`, adapts to it and returns the
/// adapted segmenter with its episode.
pub fn adapt_to_category(
    dataset: &Dataset,
    model: &Model,
    cfg: &RunConfig,
    category: &str,
    shots: usize,
    task: u64,
) -> Result<(ParamBundle, Episode), TrainError> {
    let spec = EpisodeSpec {
        n_way: 1,
        k_shot: shots,
        points: cfg.points,
        query_limit: cfg.query_limit,
    };
    let episode = build_episode(
        dataset,
        &[category.to_string()],
        &spec,
        &mut stream(cfg.seed, EXPORT, task),
    )?;
    let bundle = adapt_model(
        &episode.support,
        model,
        cfg,
        &mut stream(cfg.seed, EXPORT, task | 1 << 40),
    )?;
    Ok((bundle, episode))
}

/// The episode-specific segmenter: adapted `theta_t` with the predicted
/// overlay (zero in mode A).
pub fn adapt_model<R: Rng>(
    support: &[EpisodeShape],
    model: &Model,
    cfg: &RunConfig,
    noise_rng: &mut R,
) -> Result<ParamBundle, TrainError> {
    let theta_m = match (model.mode, &model.meta) {
        (Mode::A, _) => model.bundle.theta_m.clone(),
        (mode, Some(meta)) => predict_overlay(
            support,
            &model.bundle,
            meta,
            mode,
            cfg.test_samples,
            noise_rng,
        )?,
        (mode, None) => {
            return Err(TrainError::Mode(format!(
                "mode {mode} model has no meta learner"
            )))
        }
    };
    let with_m = model.bundle.with_theta_m(theta_m)?;
    let adapted = inner_adapt(support, &with_m, cfg.inner_steps, cfg.inner_lr)?;
    Ok(ParamBundle {
        theta_t: adapted.theta_t,
        ..with_m
    })
}
