//! Seeded random layers, weights and inputs for equivalence testing.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::fxp::{FixedPointFormat, FixedWord};
use crate::model::{
    preprocess_model, Activation, FloatLayer, LayerKind, LayerSpec, LayerWeights, ModelSpec, PoolKind,
    PreprocessOptions,
};

/// Bounds for [`random_layer`].
#[derive(Debug, Clone, Copy)]
pub struct LayerBounds {
    pub max_rows: usize,
    pub max_depth: usize,
    pub max_kernels: usize,
}

impl Default for LayerBounds {
    fn default() -> Self {
        Self {
            max_rows: 16,
            max_depth: 32,
            max_kernels: 16,
        }
    }
}

/// A single-layer model with quantized weights and a random input.
#[derive(Debug, Clone)]
pub struct LayerCase {
    pub model: ModelSpec,
    pub weights: Vec<LayerWeights>,
    pub input: Vec<FixedWord>,
}

pub fn random_layer<R: Rng>(rng: &mut R, kind: LayerKind, format: FixedPointFormat, b: LayerBounds) -> LayerCase {
    let rows = rng.random_range(1..=b.max_rows);
    let depth = rng.random_range(1..=b.max_depth);
    let act = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Linear
    };
    let spec = match kind {
        LayerKind::Dense => LayerSpec::dense(rng.random_range(1..=b.max_kernels), act),
        LayerKind::Conv => {
            let pad = rng.random_range(0..=2usize.min(rows));
            let window = rng.random_range(1..=(rows + 2 * pad).min(5));
            let stride = rng.random_range(1..=3);
            LayerSpec::conv(rng.random_range(1..=b.max_kernels), window, stride, pad, act)
        }
        pool => {
            let window = rng.random_range(1..=rows.min(4));
            let stride = rng.random_range(1..=3);
            LayerSpec::pool(pool.pool().unwrap_or(PoolKind::Max), window, stride)
        }
    };
    let model = ModelSpec {
        name: String::from("random"),
        input: [rows, rows, depth],
        layers: vec![spec],
    };
    let autoscale = rng.random_bool(0.5);
    let weights = random_weights(rng, &model, format, 1.0, autoscale);
    let input = random_words(rng, rows * rows * depth, format);
    LayerCase { model, weights, input }
}

/// Float weights drawn uniformly from `[-limit, limit)`, quantized.
pub fn random_weights<R: Rng>(
    rng: &mut R,
    model: &ModelSpec,
    format: FixedPointFormat,
    limit: f64,
    autoscale: bool,
) -> Vec<LayerWeights> {
    let floats = random_floats(rng, model, limit);
    preprocess_model(model, &floats, PreprocessOptions::new(format, autoscale))
        .expect("valid random model")
        .0
}

pub fn random_floats<R: Rng>(rng: &mut R, model: &ModelSpec, limit: f64) -> Vec<FloatLayer> {
    model
        .shapes()
        .expect("valid model")
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind.has_weights())
        .map(|(i, s)| FloatLayer {
            index: i,
            kind: s.kind,
            filters: s.filters,
            window: s.window,
            depth: s.window_depth,
            bias: (0..s.filters).map(|_| rng.random_range(-limit..limit)).collect(),
            kernels: (0..s.filters * s.filter_len())
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
        })
        .collect()
}

/// Uniform words over the whole representable range.
pub fn random_words<R: Rng>(rng: &mut R, n: usize, format: FixedPointFormat) -> Vec<FixedWord> {
    (0..n)
        .map(|_| {
            let raw = rng.random_range(format.raw_min()..=format.raw_max());
            FixedWord::saturating_from_raw(raw as i128, format)
        })
        .collect()
}
