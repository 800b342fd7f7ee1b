//! Meta part segmentation learner.
//!
//! From the segmenter's per-point descriptor a score network `f1` produces a
//! positive score `λ_x` for every point. The score weights the point's
//! logit-gradient and loss, `s_x = [λ_x ∇_x, λ_x l_x]`. A shared per-point
//! projection followed by a mean over points turns `s_x` into one task
//! vector, from which `f2` emits a mean and a log standard deviation for the
//! flattened parameters of each of `g1`, `g2`, `g3`. Sampling
//! `μ + σ ⊙ ε` yields the `theta_m` overlay.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::psl::{tensors, LayerNodes, LayerParams, LayerPlan};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Initial log standard deviation of every sampled weight.
pub const INIT_LOG_SIGMA: f64 = -3.0;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MetaPlan {
    /// Hidden widths of `f1` before its `k`-wide layer.
    pub score_hidden: Vec<usize>,
    /// Width `k` of the score features and of the task embedding.
    pub k: usize,
    /// Hidden widths of `f2` before the heads.
    pub f2_hidden: Vec<usize>,
}

impl Default for MetaPlan {
    fn default() -> Self {
        Self {
            score_hidden: vec![32],
            k: 16,
            f2_hidden: vec![32],
        }
    }
}

/// Which parts of the meta pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetaFeatures {
    /// Learned `λ_x`; otherwise `λ_x ≡ 1`.
    pub score: bool,
    /// Sample `μ + σ ε`; otherwise `theta_m = μ`.
    pub sample: bool,
    /// Add the KL regularizer.
    pub kl: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub plan: MetaPlan,
    /// Flattened sizes `w₁, w₂, w₃` of the overlay groups.
    pub targets: [usize; 3],
    /// Width `c` of the logit gradients the projection expects.
    pub classes: usize,
    /// `f1`: hidden layers, the `k`-wide layer, then the scalar head.
    pub score: Vec<LayerParams>,
    /// `(c + 1) → k`
    pub projection: LayerParams,
    pub f2_hidden: Vec<LayerParams>,
    pub mu_heads: Vec<LayerParams>,
    pub log_sigma_heads: Vec<LayerParams>,
}

impl MetaState {
    /// Hidden layers Glorot-initialized; heads start with zero weights so the
    /// initial mean is 0 and the initial log σ is [`INIT_LOG_SIGMA`].
    pub fn init<R: Rng>(plan: MetaPlan, layers: &LayerPlan, rng: &mut R) -> Self {
        let mut score = Vec::new();
        let mut width = layers.descriptor_width();
        for &w in plan.score_hidden.iter().chain(std::iter::once(&plan.k)) {
            score.push(LayerParams::glorot(w, width, rng));
            width = w;
        }
        score.push(LayerParams::glorot(1, width, rng));

        let projection = LayerParams::glorot(plan.k, layers.classes + 1, rng);

        let mut f2_hidden = Vec::new();
        let mut width = plan.k;
        for &w in &plan.f2_hidden {
            f2_hidden.push(LayerParams::glorot(w, width, rng));
            width = w;
        }
        let targets = layers.group_sizes();
        let mu_heads = targets
            .iter()
            .map(|&n| LayerParams::zeros(n, width))
            .collect();
        let log_sigma_heads = targets
            .iter()
            .map(|&n| {
                let mut l = LayerParams::zeros(n, width);
                l.bias = Tensor::full(&[n], INIT_LOG_SIGMA);
                l
            })
            .collect();
        Self {
            plan,
            targets,
            classes: layers.classes,
            score,
            projection,
            f2_hidden,
            mu_heads,
            log_sigma_heads,
        }
    }

    /// Every layer in a fixed order: score, projection, f2 hidden, μ heads,
    /// log σ heads.
    pub fn layers(&self) -> Vec<&LayerParams> {
        self.score
            .iter()
            .chain(std::iter::once(&self.projection))
            .chain(&self.f2_hidden)
            .chain(&self.mu_heads)
            .chain(&self.log_sigma_heads)
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.score
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .chain(&mut self.f2_hidden)
            .chain(&mut self.mu_heads)
            .chain(&mut self.log_sigma_heads)
            .collect()
    }

    /// Parameter tensors in [`MetaState::layers`] order, weight before bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds a state from tensors in [`MetaState::tensors`] order.
    pub fn from_tensors(
        plan: MetaPlan,
        layers: &LayerPlan,
        values: Vec<Tensor>,
    ) -> Result<Self, TensorError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut state = Self::init(plan, layers, &mut rng);
        let slots = state.tensors_mut();
        if slots.len() != values.len() {
            return Err(TensorError::ParamCount {
                params: slots.len(),
                grads: values.len(),
            });
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "meta state",
                    left: slot.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            *slot = v;
        }
        Ok(state)
    }
}

/// Graph leaves for a [`MetaState`], grouped like its layers.
#[derive(Debug, Clone)]
pub struct MetaNodes {
    pub score: Vec<LayerNodes>,
    pub projection: LayerNodes,
    pub f2_hidden: Vec<LayerNodes>,
    pub mu_heads: Vec<LayerNodes>,
    pub log_sigma_heads: Vec<LayerNodes>,
}

impl MetaNodes {
    pub fn new(g: &mut Graph, meta: &MetaState, trainable: bool) -> Self {
        let mut leaf = |l: &LayerParams| {
            let (w, b) = (l.weight.clone(), l.bias.clone());
            if trainable {
                LayerNodes {
                    weight: g.param(w),
                    bias: g.param(b),
                }
            } else {
                LayerNodes {
                    weight: g.constant(w),
                    bias: g.constant(b),
                }
            }
        };
        Self {
            score: meta.score.iter().map(&mut leaf).collect(),
            projection: leaf(&meta.projection),
            f2_hidden: meta.f2_hidden.iter().map(&mut leaf).collect(),
            mu_heads: meta.mu_heads.iter().map(&mut leaf).collect(),
            log_sigma_heads: meta.log_sigma_heads.iter().map(&mut leaf).collect(),
        }
    }

    /// Ids in [`MetaState::tensors`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        self.score
            .iter()
            .chain(std::iter::once(&self.projection))
            .chain(&self.f2_hidden)
            .chain(&self.mu_heads)
            .chain(&self.log_sigma_heads)
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Rebuilds the grouping from ids in [`MetaState::tensors`] order.
    pub fn from_ids(meta: &MetaState, ids: &[NodeId]) -> Self {
        let mut pairs = ids.chunks(2).map(|c| LayerNodes {
            weight: c[0],
            bias: c[1],
        });
        let mut take = |n: usize| (&mut pairs).take(n).collect::<Vec<_>>();
        let score = take(meta.score.len());
        let projection = take(1)[0];
        let f2_hidden = take(meta.f2_hidden.len());
        let mu_heads = take(3);
        let log_sigma_heads = take(3);
        Self {
            score,
            projection,
            f2_hidden,
            mu_heads,
            log_sigma_heads,
        }
    }
}

/// `λ_x = softplus(f1(descriptor))`, one value per row.
pub fn part_score_node(
    g: &mut Graph,
    nodes: &MetaNodes,
    descriptor: NodeId,
) -> Result<NodeId, TensorError> {
    let n = g.value(descriptor).rows();
    let (head, hidden) = nodes.score.split_last().expect("score net has a head");
    let mut h = descriptor;
    for l in hidden {
        h = g.linear(h, l.weight, l.bias)?;
        h = g.relu(h)?;
    }
    let raw = g.linear(h, head.weight, head.bias)?;
    let pos = g.softplus(raw)?;
    g.reshape(pos, &[n])
}

/// Per-point projection of `s_x` followed by the mean over points.
pub fn task_embed_node(
    g: &mut Graph,
    nodes: &MetaNodes,
    s_x: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let p = &nodes.projection;
    let h = g.linear(s_x, p.weight, p.bias)?;
    let per_point = g.relu(h)?;
    let pooled = g.mean_rows(per_point)?;
    Ok((per_point, pooled))
}

/// `(μ, log σ)` node pairs of the three overlay groups, as flat vectors.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub mu: [NodeId; 3],
    pub log_sigma: [NodeId; 3],
}

pub fn vae_heads_node(
    g: &mut Graph,
    nodes: &MetaNodes,
    pooled: NodeId,
) -> Result<HeadNodes, TensorError> {
    let k = g.value(pooled).len();
    let mut h = g.reshape(pooled, &[1, k])?;
    for l in &nodes.f2_hidden {
        h = g.linear(h, l.weight, l.bias)?;
        h = g.relu(h)?;
    }
    let mut mu = Vec::with_capacity(3);
    let mut log_sigma = Vec::with_capacity(3);
    for (m, s) in nodes.mu_heads.iter().zip(&nodes.log_sigma_heads) {
        let mv = g.linear(h, m.weight, m.bias)?;
        let w = g.value(mv).len();
        mu.push(g.reshape(mv, &[w])?);
        let sv = g.linear(h, s.weight, s.bias)?;
        log_sigma.push(g.reshape(sv, &[w])?);
    }
    Ok(HeadNodes {
        mu: [mu[0], mu[1], mu[2]],
        log_sigma: [log_sigma[0], log_sigma[1], log_sigma[2]],
    })
}

/// `θ = μ + exp(log σ) ⊙ ε` per group.
pub fn sample_node(
    g: &mut Graph,
    heads: &HeadNodes,
    noise: &[Tensor; 3],
) -> Result<[NodeId; 3], TensorError> {
    let mut out = [heads.mu[0]; 3];
    for i in 0..3 {
        let sigma = g.exp(heads.log_sigma[i])?;
        let eps = g.constant(noise[i].clone());
        let scaled = g.mul(sigma, eps)?;
        out[i] = g.add(heads.mu[i], scaled)?;
    }
    Ok(out)
}

/// `Σ ½ (μ² + σ² − 1 − 2 log σ)` over all groups and entries.
pub fn kl_node(g: &mut Graph, heads: &HeadNodes) -> Result<NodeId, TensorError> {
    let terms = kl_terms_node(g, heads)?;
    g.sum(terms)
}

/// Per-coordinate KL terms `½(μ² + σ² − 1 − 2 log σ)`, all groups in order.
pub fn kl_terms_node(g: &mut Graph, heads: &HeadNodes) -> Result<NodeId, TensorError> {
    let mut terms = Vec::with_capacity(3);
    for i in 0..3 {
        let mu2 = g.square(heads.mu[i])?;
        let two_ls = g.scale(heads.log_sigma[i], 2.0)?;
        let var = g.exp(two_ls)?;
        let a = g.add(mu2, var)?;
        let b = g.sub(a, two_ls)?;
        let c = g.add_const(b, -1.0)?;
        terms.push(g.scale(c, 0.5)?);
    }
    g.concat_flat(&terms)
}

/// Splits the group vectors into per-layer weight/bias nodes.
pub fn overlay_nodes(
    g: &mut Graph,
    plan: &LayerPlan,
    theta: &[NodeId; 3],
) -> Result<Vec<LayerNodes>, TensorError> {
    let shapes = plan.layer_shapes();
    let mut out = Vec::with_capacity(shapes.len());
    for (gi, range) in plan.groups().into_iter().enumerate() {
        let mut offset = 0;
        for &(o, i) in &shapes[range] {
            let weight = g.slice(theta[gi], offset, &[o, i])?;
            offset += o * i;
            let bias = g.slice(theta[gi], offset, &[o])?;
            offset += o;
            out.push(LayerNodes { weight, bias });
        }
    }
    Ok(out)
}

/// Draws `ε ~ N(0, I)` for the three groups.
pub fn draw_noise<R: Rng>(targets: &[usize; 3], rng: &mut R) -> [Tensor; 3] {
    targets.map(|n| Tensor::vector((0..n).map(|_| rng.sample(StandardNormal)).collect()))
}

/// Graph handles of one run of the meta pipeline.
#[derive(Debug, Clone, Copy)]
pub struct MetaForward {
    pub lambda: NodeId,
    pub s_x: NodeId,
    pub pooled: NodeId,
    pub heads: HeadNodes,
    pub theta: [NodeId; 3],
    pub kl: Option<NodeId>,
}

/// Descriptor → `λ_x` → `s_x` → task embedding → heads → `theta_m`.
///
/// `point_features` is `[∇_x, l_x]` row by row (`N × (c + 1)`); `descriptor`
/// is `N × p`. Both enter as constants here. `noise` is required when
/// `features.sample` is set.
pub fn meta_forward(
    g: &mut Graph,
    nodes: &MetaNodes,
    features: MetaFeatures,
    descriptor: &Tensor,
    point_features: &Tensor,
    noise: Option<&[Tensor; 3]>,
) -> Result<MetaForward, TensorError> {
    let d = g.constant(descriptor.clone());
    let raw = g.constant(point_features.clone());
    meta_forward_nodes(g, nodes, features, d, raw, noise)
}

/// [`meta_forward`] on inputs that are already graph nodes.
pub fn meta_forward_nodes(
    g: &mut Graph,
    nodes: &MetaNodes,
    features: MetaFeatures,
    descriptor: NodeId,
    point_features: NodeId,
    noise: Option<&[Tensor; 3]>,
) -> Result<MetaForward, TensorError> {
    let n = g.value(point_features).rows();
    let lambda = if features.score {
        part_score_node(g, nodes, descriptor)?
    } else {
        g.constant(Tensor::full(&[n], 1.0))
    };
    let s_x = g.scale_rows(point_features, lambda)?;
    let (_, pooled) = task_embed_node(g, nodes, s_x)?;
    let heads = vae_heads_node(g, nodes, pooled)?;
    let theta = if features.sample {
        let noise = noise.ok_or(TensorError::Empty {
            op: "sample_theta_m noise",
        })?;
        sample_node(g, &heads, noise)?
    } else {
        heads.mu
    };
    let kl = if features.kl {
        Some(kl_node(g, &heads)?)
    } else {
        None
    };
    Ok(MetaForward {
        lambda,
        s_x,
        pooled,
        heads,
        theta,
        kl,
    })
}

// Value-level API over the same graph code.

pub fn part_score(descriptor: &Tensor, meta: &MetaState) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let nodes = MetaNodes::new(&mut g, meta, false);
    let d = g.constant(descriptor.clone());
    let l = part_score_node(&mut g, &nodes, d)?;
    Ok(g.value(l).clone())
}

/// Row `x` is `[λ_x ∇_x, λ_x l_x]`.
pub fn part_specific_feature(
    lambda: &Tensor,
    logit_grads: &Tensor,
    losses: &Tensor,
) -> Result<Tensor, TensorError> {
    let raw = stack_point_features(logit_grads, losses)?;
    let mut g = Graph::new();
    let r = g.constant(raw);
    let l = g.constant(lambda.clone());
    let s = g.scale_rows(r, l)?;
    Ok(g.value(s).clone())
}

/// `[∇_x, l_x]` as an `N × (c + 1)` matrix.
pub fn stack_point_features(logit_grads: &Tensor, losses: &Tensor) -> Result<Tensor, TensorError> {
    let (n, c) = logit_grads.matrix_dims("part_specific_feature")?;
    if losses.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "part_specific_feature",
            left: logit_grads.shape().to_vec(),
            right: losses.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(n * (c + 1));
    for i in 0..n {
        data.extend_from_slice(logit_grads.row(i));
        data.push(losses.data()[i]);
    }
    Tensor::new(vec![n, c + 1], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding {
    /// Projected `s_x`, `N × k`.
    pub per_point: Tensor,
    /// Mean over points, length `k`.
    pub pooled: Tensor,
}

pub fn task_embed(s_x: &Tensor, meta: &MetaState) -> Result<TaskEmbedding, TensorError> {
    let mut g = Graph::new();
    let nodes = MetaNodes::new(&mut g, meta, false);
    let s = g.constant(s_x.clone());
    let (pp, pooled) = task_embed_node(&mut g, &nodes, s)?;
    Ok(TaskEmbedding {
        per_point: g.value(pp).clone(),
        pooled: g.value(pooled).clone(),
    })
}

/// Means and standard deviations per group.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeHeads {
    pub mu: [Tensor; 3],
    pub sigma: [Tensor; 3],
}

impl VaeHeads {
    pub fn total_len(&self) -> usize {
        self.mu.iter().chain(&self.sigma).map(Tensor::len).sum()
    }
}

pub fn vae_heads(emb: &TaskEmbedding, meta: &MetaState) -> Result<VaeHeads, TensorError> {
    let mut g = Graph::new();
    let nodes = MetaNodes::new(&mut g, meta, false);
    let p = g.constant(emb.pooled.clone());
    let h = vae_heads_node(&mut g, &nodes, p)?;
    Ok(VaeHeads {
        mu: h.mu.map(|id| g.value(id).clone()),
        sigma: h.log_sigma.map(|id| g.value(id).map(f64::exp)),
    })
}

/// `μ + σ ⊙ ε`.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor, TensorError> {
    let scaled = sigma.zip_map(eps, |s, e| s * e)?;
    mu.add(&scaled)
}

pub fn sample_theta_m<R: Rng>(heads: &VaeHeads, rng: &mut R) -> Result<[Tensor; 3], TensorError> {
    let sizes = heads.mu.each_ref().map(Tensor::len);
    let noise = draw_noise(&sizes, rng);
    let mut out = heads.mu.clone();
    for i in 0..3 {
        out[i] = reparameterize(&heads.mu[i], &heads.sigma[i], &noise[i])?;
    }
    Ok(out)
}

pub fn kl_to_standard_normal(heads: &VaeHeads) -> f64 {
    let mut total = 0.0;
    for (mu, sigma) in heads.mu.iter().zip(&heads.sigma) {
        for (&m, &s) in mu.data().iter().zip(sigma.data()) {
            total += 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln());
        }
    }
    total
}

/// Reshapes group vectors into layer-congruent overlays.
pub fn overlays_from_flat(
    plan: &LayerPlan,
    theta: &[Tensor; 3],
) -> Result<Vec<LayerParams>, TensorError> {
    let shapes = plan.layer_shapes();
    let mut out = Vec::with_capacity(shapes.len());
    for (gi, range) in plan.groups().into_iter().enumerate() {
        let data = theta[gi].data();
        let expected: usize = shapes[range.clone()].iter().map(|(o, i)| o * i + o).sum();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: vec![expected],
                len: data.len(),
            });
        }
        let mut offset = 0;
        for &(o, i) in &shapes[range] {
            let weight = Tensor::new(vec![o, i], data[offset..offset + o * i].to_vec())?;
            offset += o * i;
            let bias = Tensor::new(vec![o], data[offset..offset + o].to_vec())?;
            offset += o;
            out.push(LayerParams { weight, bias });
        }
    }
    Ok(out)
}

/// Flattens layers group by group (inverse of [`overlays_from_flat`]).
pub fn flatten_groups(plan: &LayerPlan, layers: &[LayerParams]) -> [Tensor; 3] {
    plan.groups().map(|range| {
        let data = tensors(&layers[range])
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        Tensor::vector(data)
    })
}
