//! Seeded desk-scale reference CNN and calibration inputs.
//!
//! Layout (ids):
//!
//! ```text
//!  0 input [3,16,16]
//!  1 conv 3x3 -> 16      2 relu
//!  3 conv 3x3 -> 16      4 relu
//!  5 add(4, 2)           6 maxpool 2 -> [16,8,8]
//!  7 conv 1x1 (6)        8 relu
//!  9 conv 3x3 (6)       10 relu
//! 11 concat(8, 10)      12 maxpool 2 -> [32,4,4]
//! 13 flatten            14 dense -> 10
//! 15 output
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::ContinuousCDF;

use crate::graph::{DepGraph, Op};
use crate::model::{param_count, Model, Weights};
use crate::tensor::Tensor;

pub const INPUT_SHAPE: [usize; 3] = [3, 16, 16];
pub const CLASSES: usize = 10;

pub fn reference_graph() -> DepGraph {
    let conv = |out_channels, kernel| Op::Conv2d {
        out_channels,
        kernel,
        stride: 1,
        padding: kernel / 2,
    };
    DepGraph::new(vec![
        (Op::Input { shape: INPUT_SHAPE.to_vec() }, vec![]),
        (conv(16, 3), vec![0]),
        (Op::Relu, vec![1]),
        (conv(16, 3), vec![2]),
        (Op::Relu, vec![3]),
        (Op::Add, vec![4, 2]),
        (Op::MaxPool { kernel: 2, stride: 2 }, vec![5]),
        (conv(16, 1), vec![6]),
        (Op::Relu, vec![7]),
        (conv(16, 3), vec![6]),
        (Op::Relu, vec![9]),
        (Op::Concat, vec![8, 10]),
        (Op::MaxPool { kernel: 2, stride: 2 }, vec![11]),
        (Op::Flatten, vec![12]),
        (Op::Dense { units: CLASSES }, vec![13]),
        (Op::Output, vec![14]),
    ])
    .expect("reference graph is valid")
}

/// Reference model with He-initialised kernels and negative-leaning conv
/// biases, which keeps ReLU outputs sparse as in trained CNNs.
pub fn reference_model(seed: u64) -> Model {
    let graph = reference_graph();
    let shapes = crate::engine::infer_shapes(&graph).expect("reference shapes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for node in graph.nodes() {
        let Some(&first) = node.inputs.first() else { continue };
        let total = param_count(&node.op, Some(&shapes[first]));
        if total == 0 {
            continue;
        }
        let (units, fan_in, bias_mean) = match node.op {
            Op::Conv2d { out_channels, kernel, .. } => {
                (out_channels, shapes[first][0] * kernel * kernel, -0.15)
            }
            Op::Dense { units } => (units, shapes[first].iter().product(), 0.0),
            _ => unreachable!(),
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let kernel = Normal::new(0.0, std).unwrap();
        let bias = Normal::new(bias_mean, 0.05).unwrap();
        let mut values: Vec<f32> = (0..total - units).map(|_| kernel.sample(&mut rng) as f32).collect();
        values.extend((0..units).map(|_| bias.sample(&mut rng) as f32));
        params.insert(node.id, values);
    }
    Model::new(graph, Weights::new(params)).expect("reference weights match the graph")
}

/// Seeded inputs of the reference shape drawn uniformly from `[0, 1)`.
pub fn reference_inputs(seed: u64, count: usize) -> Vec<Tensor> {
    seeded_inputs(&INPUT_SHAPE, seed, count)
}

/// Seeded tensors of any shape drawn uniformly from `[0, 1)`.
pub fn seeded_inputs(shape: &[usize], seed: u64, count: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    (0..count)
        .map(|_| {
            let data = (0..len).map(|_| rng.random::<f32>()).collect();
            Tensor::new(shape.to_vec(), data).expect("shape and data agree")
        })
        .collect()
}

/// ReLU of a shifted standard normal: about `zero_fraction` of the
/// elements are exactly zero and the rest follow the activation's tail.
pub fn relu_tensor(shape: Vec<usize>, zero_fraction: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let shift = statrs::distribution::Normal::standard().inverse_cdf(zero_fraction.clamp(1e-12, 1.0 - 1e-12));
    let n = shape.iter().product();
    let data = (0..n).map(|_| (normal.sample(&mut rng) - shift).max(0.0) as f32).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Uniform values in `[lo, hi)`; dense and incompressible once quantized.
pub fn uniform_tensor(shape: Vec<usize>, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::forward_logits;

    #[test]
    fn seeded_model_is_reproducible() {
        let a = reference_model(7);
        let b = reference_model(7);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), reference_model(8).digest());
    }

    #[test]
    fn forward_pass_produces_logits() {
        let m = reference_model(1);
        let input = reference_inputs(2, 1).remove(0);
        let logits = forward_logits(&m, input).unwrap();
        assert_eq!(logits.shape(), &[CLASSES]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn relu_split_candidates() {
        let g = reference_graph();
        let relu: Vec<_> = g.candidate_splits(true).iter().map(|s| s.split).collect();
        assert_eq!(relu, vec![0, 2, 4, 10, 15]);
    }
}
