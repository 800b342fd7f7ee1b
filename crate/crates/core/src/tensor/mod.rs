//! Dense `f64` tensors, a define-by-run autodiff graph, optimizers and a
//! finite-difference gradient oracle.

mod dense;
pub mod gradcheck;
mod graph;
pub mod optim;

pub use dense::Tensor;
pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("backward needs a single-element root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{params} parameters but {grads} gradients")]
    ParamCount { params: usize, grads: usize },
    #[error("ce_logit_grad needs a cross-entropy node")]
    NotCrossEntropy,
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn maxpool_is_permutation_invariant(
            t in (1usize..12, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c)),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut order: Vec<usize> = (0..t.rows()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
            let shuffled = Tensor::from_rows(&rows).unwrap();
            let mut g = Graph::new();
            let a = g.constant(t);
            let b = g.constant(shuffled);
            let pa = g.maxpool_rows(a).unwrap();
            let pb = g.maxpool_rows(b).unwrap();
            let bits = |id| g.value(id).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(pa), bits(pb));
        }

        #[test]
        fn cross_entropy_is_nonnegative(
            t in (1usize..8, 2usize..6).prop_flat_map(|(r, c)| matrix(r, c)),
            label_seed in any::<u64>(),
        ) {
            let c = t.cols();
            let labels: Vec<usize> = (0..t.rows())
                .map(|i| ((label_seed >> (i % 60)) as usize + i) % c)
                .collect();
            let mut g = Graph::new();
            let x = g.constant(t);
            let l = g.softmax_cross_entropy(x, &labels).unwrap();
            prop_assert!(g.value(l).data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn zero_gradient_step_is_identity(
            data in prop::collection::vec(-5.0f64..5.0, 1..20),
            lr in 1e-5f64..1.0,
        ) {
            let init = Tensor::vector(data);
            for mut opt in [Optimizer::sgd(lr).unwrap(), Optimizer::adam(lr).unwrap()] {
                let mut p = vec![init.clone()];
                opt.step(p.iter_mut(), &[Tensor::zeros(init.shape())]).unwrap();
                prop_assert_eq!(&p[0], &init);
            }
        }
    }
}
