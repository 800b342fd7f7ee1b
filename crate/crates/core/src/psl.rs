//! Part segmentation learner.
//!
//! A shared per-point MLP `g1` produces local features `f_x`; their
//! column-wise max is the global feature `g_x`. The descriptor
//! `[f_x, g_x, x]` (width `2m + 3`) goes through the per-point MLP `g2` to
//! point features `p_x`, and the linear layer `g3` maps those to part logits.
//!
//! Every layer's effective parameters are the element-wise sum of the
//! task-trained overlay `theta_t` and the meta-predicted overlay `theta_m`.

use std::ops::Range;

use rand::Rng;

use crate::data::EpisodeShape;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Widths of the three sub-networks.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerPlan {
    /// Output widths of the `g1` layers; the last one is `m`.
    pub g1: Vec<usize>,
    /// Output widths of the `g2` layers; the last one is `q`.
    pub g2: Vec<usize>,
    /// Output width `c` of `g3`.
    pub classes: usize,
}

impl Default for LayerPlan {
    fn default() -> Self {
        Self {
            g1: vec![32, 64, 64],
            g2: vec![64, 32],
            classes: 3,
        }
    }
}

impl LayerPlan {
    /// Full-size widths (50 global part classes).
    pub fn full_size() -> Self {
        Self {
            g1: vec![64, 128, 128, 512, 2048],
            g2: vec![256, 256, 128],
            classes: 50,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.g1.is_empty() || self.g2.is_empty() {
            return Err("g1 and g2 need at least one layer".into());
        }
        if self.g1.iter().chain(&self.g2).any(|&w| w == 0) || self.classes < 2 {
            return Err("layer widths must be ≥ 1 and classes ≥ 2".into());
        }
        Ok(())
    }

    pub fn local_width(&self) -> usize {
        *self.g1.last().expect("validated plan")
    }

    pub fn descriptor_width(&self) -> usize {
        2 * self.local_width() + 3
    }

    pub fn point_feature_width(&self) -> usize {
        *self.g2.last().expect("validated plan")
    }

    /// `(out, in)` of every layer, `g1` then `g2` then `g3`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut width = 3;
        for &w in &self.g1 {
            shapes.push((w, width));
            width = w;
        }
        width = self.descriptor_width();
        for &w in &self.g2 {
            shapes.push((w, width));
            width = w;
        }
        shapes.push((self.classes, width));
        shapes
    }

    /// Layer index ranges of `g1`, `g2`, `g3`.
    pub fn groups(&self) -> [Range<usize>; 3] {
        let a = self.g1.len();
        let b = a + self.g2.len();
        [0..a, a..b, b..b + 1]
    }

    /// Flattened parameter count of each group.
    pub fn group_sizes(&self) -> [usize; 3] {
        let shapes = self.layer_shapes();
        self.groups()
            .map(|r| shapes[r].iter().map(|(o, i)| o * i + o).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `out × in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    /// Uniform in ±sqrt(6 / (in + out)), zero bias.
    pub fn glorot<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let data = (0..out * inp)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor::new(vec![out, inp], data).expect("sized"),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.shape() == other.bias.shape()
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        Ok(Self {
            weight: self.weight.add(&other.weight)?,
            bias: self.bias.add(&other.bias)?,
        })
    }
}

/// Flat views over a layer list in `(weight, bias)` order.
pub fn tensors(layers: &[LayerParams]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

pub fn tensors_mut(layers: &mut [LayerParams]) -> Vec<&mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub plan: LayerPlan,
    pub theta_t: Vec<LayerParams>,
    pub theta_m: Vec<LayerParams>,
}

impl ParamBundle {
    /// Glorot-initialized `theta_t` and an all-zero `theta_m`.
    pub fn init<R: Rng>(plan: LayerPlan, rng: &mut R) -> Self {
        let shapes = plan.layer_shapes();
        let theta_t = shapes
            .iter()
            .map(|&(o, i)| LayerParams::glorot(o, i, rng))
            .collect();
        let theta_m = shapes
            .iter()
            .map(|&(o, i)| LayerParams::zeros(o, i))
            .collect();
        Self {
            plan,
            theta_t,
            theta_m,
        }
    }

    pub fn with_theta_m(&self, theta_m: Vec<LayerParams>) -> Result<Self, TensorError> {
        check_congruent(&self.theta_t, &theta_m)?;
        Ok(Self {
            plan: self.plan.clone(),
            theta_t: self.theta_t.clone(),
            theta_m,
        })
    }

    pub fn clear_theta_m(&mut self) {
        for l in &mut self.theta_m {
            l.weight = Tensor::zeros(l.weight.shape());
            l.bias = Tensor::zeros(l.bias.shape());
        }
    }

    /// `theta_t + theta_m`, layer by layer.
    pub fn effective_params(&self) -> Result<Vec<LayerParams>, TensorError> {
        check_congruent(&self.theta_t, &self.theta_m)?;
        self.theta_t
            .iter()
            .zip(&self.theta_m)
            .map(|(t, m)| t.add(m))
            .collect()
    }
}

fn check_congruent(a: &[LayerParams], b: &[LayerParams]) -> Result<(), TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::ParamCount {
            params: a.len(),
            grads: b.len(),
        });
    }
    for (x, y) in a.iter().zip(b) {
        if !x.same_shape(y) {
            return Err(TensorError::ShapeMismatch {
                op: "theta_t ⊕ theta_m",
                left: x.weight.shape().to_vec(),
                right: y.weight.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Graph handles of one layer's effective weight and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Adds layers as leaves: trainable when `trainable`, constants otherwise.
pub fn layer_leaves(g: &mut Graph, layers: &[LayerParams], trainable: bool) -> Vec<LayerNodes> {
    layers
        .iter()
        .map(|l| {
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
        })
        .collect()
}

/// Element-wise sums `theta_t ⊕ theta_m` inside the graph.
pub fn overlay(
    g: &mut Graph,
    theta_t: &[LayerNodes],
    theta_m: &[LayerNodes],
) -> Result<Vec<LayerNodes>, TensorError> {
    theta_t
        .iter()
        .zip(theta_m)
        .map(|(t, m)| {
            Ok(LayerNodes {
                weight: g.add(t.weight, m.weight)?,
                bias: g.add(t.bias, m.bias)?,
            })
        })
        .collect()
}

/// Node ids of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub local: NodeId,
    pub global: NodeId,
    pub descriptor: NodeId,
    pub point_features: NodeId,
    pub logits: NodeId,
}

/// Forward pass of one cloud (`points: N × 3`) through effective layers.
pub fn forward(
    g: &mut Graph,
    plan: &LayerPlan,
    layers: &[LayerNodes],
    points: NodeId,
) -> Result<ForwardNodes, TensorError> {
    let [g1, g2, g3] = plan.groups();
    let n = g.value(points).rows();
    let mut h = points;
    for l in &layers[g1] {
        h = g.linear(h, l.weight, l.bias)?;
        h = g.relu(h)?;
    }
    let local = h;
    let global = g.maxpool_rows(local)?;
    let tiled = g.repeat_rows(global, n)?;
    let descriptor = g.concat_cols(&[local, tiled, points])?;
    let mut h = descriptor;
    for l in &layers[g2] {
        h = g.linear(h, l.weight, l.bias)?;
        h = g.relu(h)?;
    }
    let point_features = h;
    let out = &layers[g3][0];
    let logits = g.linear(point_features, out.weight, out.bias)?;
    Ok(ForwardNodes {
        local,
        global,
        descriptor,
        point_features,
        logits,
    })
}

/// Mean per-point cross-entropy over all points of `shapes`.
pub fn mean_loss(
    g: &mut Graph,
    plan: &LayerPlan,
    layers: &[LayerNodes],
    shapes: &[EpisodeShape],
) -> Result<NodeId, TensorError> {
    Ok(mean_loss_with_logits(g, plan, layers, shapes)?.0)
}

/// [`mean_loss`] plus the logits node of every shape.
pub fn mean_loss_with_logits(
    g: &mut Graph,
    plan: &LayerPlan,
    layers: &[LayerNodes],
    shapes: &[EpisodeShape],
) -> Result<(NodeId, Vec<NodeId>), TensorError> {
    let total: usize = shapes.iter().map(EpisodeShape::len).sum();
    if total == 0 {
        return Err(TensorError::Empty { op: "mean_loss" });
    }
    let mut sums = Vec::with_capacity(shapes.len());
    let mut logits = Vec::with_capacity(shapes.len());
    for s in shapes {
        let pts = g.constant(s.coords());
        let fwd = forward(g, plan, layers, pts)?;
        let per_point = g.softmax_cross_entropy(fwd.logits, &s.targets)?;
        sums.push(g.sum(per_point)?);
        logits.push(fwd.logits);
    }
    let all = g.concat_flat(&sums)?;
    let s = g.sum(all)?;
    Ok((g.scale(s, 1.0 / total as f64)?, logits))
}

/// Per-point cross-entropy and its gradient with respect to the logits row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLoss {
    /// `l_x`, length `N`
    pub per_point: Tensor,
    /// `∇_x = softmax(o_x) − onehot(label)`, `N × c`
    pub logit_grads: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PslOutput {
    pub local: Tensor,
    pub global: Tensor,
    pub descriptor: Tensor,
    pub point_features: Tensor,
    pub logits: Tensor,
    pub loss: Option<PointLoss>,
}

fn run(
    points: &Tensor,
    labels: Option<&[usize]>,
    bundle: &ParamBundle,
) -> Result<PslOutput, TensorError> {
    let mut g = Graph::new();
    let t = layer_leaves(&mut g, &bundle.theta_t, false);
    let m = layer_leaves(&mut g, &bundle.theta_m, false);
    let layers = overlay(&mut g, &t, &m)?;
    let pts = g.constant(points.clone());
    let fwd = forward(&mut g, &bundle.plan, &layers, pts)?;
    let loss = match labels {
        Some(labels) => {
            let ce = g.softmax_cross_entropy(fwd.logits, labels)?;
            let mut grads = g.softmax_of(ce).expect("cross-entropy node").clone();
            let c = grads.cols();
            for (row, &label) in grads.data_mut().chunks_mut(c).zip(labels) {
                row[label] -= 1.0;
            }
            Some(PointLoss {
                per_point: g.value(ce).clone(),
                logit_grads: grads,
            })
        }
        None => None,
    };
    Ok(PslOutput {
        local: g.value(fwd.local).clone(),
        global: g.value(fwd.global).clone(),
        descriptor: g.value(fwd.descriptor).clone(),
        point_features: g.value(fwd.point_features).clone(),
        logits: g.value(fwd.logits).clone(),
        loss,
    })
}

/// Local and global shape features.
pub fn embed(points: &Tensor, bundle: &ParamBundle) -> Result<(Tensor, Tensor), TensorError> {
    let out = run(points, None, bundle)?;
    Ok((out.local, out.global))
}

pub fn predict(points: &Tensor, bundle: &ParamBundle) -> Result<PslOutput, TensorError> {
    run(points, None, bundle)
}

pub fn loss_and_pointgrads(
    points: &Tensor,
    labels: &[usize],
    bundle: &ParamBundle,
) -> Result<PslOutput, TensorError> {
    run(points, Some(labels), bundle)
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Forward pass of plain effective layers (no overlay), used to check that a
/// zero `theta_m` leaves the network unchanged.
pub fn predict_plain(
    points: &Tensor,
    plan: &LayerPlan,
    layers: &[LayerParams],
) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let nodes = layer_leaves(&mut g, layers, false);
    let pts = g.constant(points.clone());
    let fwd = forward(&mut g, plan, &nodes, pts)?;
    Ok(g.value(fwd.logits).clone())
}
