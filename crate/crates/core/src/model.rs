//! Model description, per-layer weights and the offline preprocessing step
//! (float to fixed conversion, per-layer auto-scaling, weight realignment).

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::fxp::{quantize, FixedPointFormat, FixedWord, FxpError};
use crate::tensor::Dims;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: &'static str },
    #[error("layer {layer}: input {dims:?} is not square")]
    NotSquare { layer: usize, dims: Dims },
    #[error("model has no layers")]
    Empty,
    #[error("weights for layer {layer}: {reason}")]
    WeightShape { layer: usize, reason: String },
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error(transparent)]
    Fxp(#[from] FxpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    MaxPool,
    MinPool,
    AvgPool,
    Dense,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Dense)
    }

    pub fn pool(self) -> Option<PoolKind> {
        match self {
            LayerKind::MaxPool => Some(PoolKind::Max),
            LayerKind::MinPool => Some(PoolKind::Min),
            LayerKind::AvgPool => Some(PoolKind::Avg),
            _ => None,
        }
    }

    /// Byte tag used by the binary weight formats.
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::MaxPool => 1,
            LayerKind::MinPool => 2,
            LayerKind::AvgPool => 3,
            LayerKind::Dense => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv,
            1 => LayerKind::MaxPool,
            2 => LayerKind::MinPool,
            3 => LayerKind::AvgPool,
            4 => LayerKind::Dense,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Min,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
}

impl Activation {
    pub fn apply_word(self, w: FixedWord) -> FixedWord {
        match self {
            Activation::Linear => w,
            Activation::Relu => w.relu(),
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(rename = "type")]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(default = "one")]
    pub window: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(kernels: usize, window: usize, stride: usize, pad: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernels: Some(kernels),
            units: None,
            window,
            stride,
            pad,
            activation,
        }
    }

    pub fn pool(kind: PoolKind, window: usize, stride: usize) -> Self {
        let kind = match kind {
            PoolKind::Max => LayerKind::MaxPool,
            PoolKind::Min => LayerKind::MinPool,
            PoolKind::Avg => LayerKind::AvgPool,
        };
        Self {
            kind,
            kernels: None,
            units: None,
            window,
            stride,
            pad: 0,
            activation: Activation::Linear,
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            kernels: None,
            units: Some(units),
            window: 1,
            stride: 1,
            pad: 0,
            activation,
        }
    }
}

/// Geometry of one layer after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub input: Dims,
    pub output: Dims,
    /// Window edge the data buffer uses; 1 for dense layers.
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    /// Depth of the window the data buffer emits: input depth for conv and
    /// pooling, the flattened input length for dense.
    pub window_depth: usize,
    /// Kernels or units; 0 for pooling.
    pub filters: usize,
}

impl LayerShape {
    /// Words in one filter (and in one emitted window).
    pub fn filter_len(&self) -> usize {
        self.window * self.window * self.window_depth
    }

    /// Row size the data buffer sees.
    pub fn row_size(&self) -> usize {
        match self.kind {
            LayerKind::Dense => 1,
            _ => self.input.rows,
        }
    }
}

/// Output edge of a sliding window.
pub fn window_positions(size: usize, window: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - window) / stride + 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// `[rows, cols, depth]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn input_dims(&self) -> Dims {
        Dims::new(self.input[0], self.input[1], self.input[2])
    }

    /// Validate every layer and chain output dims into the next input.
    pub fn shapes(&self) -> Result<Vec<LayerShape>, ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut dims = self.input_dims();
        if dims.is_empty() {
            return Err(ModelError::InvalidLayer {
                layer: 0,
                reason: "input has a zero dimension",
            });
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |reason| ModelError::InvalidLayer { layer: i, reason };
            let shape = match l.kind {
                LayerKind::Dense => {
                    if l.kernels.is_some() {
                        return Err(bad("dense layers take `units`, not `kernels`"));
                    }
                    let units = l.units.ok_or(bad("dense layer needs `units`"))?;
                    if units == 0 {
                        return Err(bad("units must be positive"));
                    }
                    if l.window != 1 || l.stride != 1 || l.pad != 0 {
                        return Err(bad("dense layers have window 1, stride 1, pad 0"));
                    }
                    LayerShape {
                        kind: l.kind,
                        input: dims,
                        output: Dims::vector(units),
                        window: 1,
                        stride: 1,
                        pad: 0,
                        window_depth: dims.len(),
                        filters: units,
                    }
                }
                kind => {
                    if !dims.is_square() {
                        return Err(ModelError::NotSquare { layer: i, dims });
                    }
                    if l.window == 0 || l.stride == 0 {
                        return Err(bad("window and stride must be positive"));
                    }
                    if dims.rows + 2 * l.pad < l.window {
                        return Err(bad("window larger than padded input"));
                    }
                    if l.units.is_some() {
                        return Err(bad("only dense layers take `units`"));
                    }
                    let edge = window_positions(dims.rows, l.window, l.stride, l.pad);
                    let (depth, filters) = if kind == LayerKind::Conv {
                        let k = l.kernels.ok_or(bad("conv layer needs `kernels`"))?;
                        if k == 0 {
                            return Err(bad("kernels must be positive"));
                        }
                        (k, k)
                    } else {
                        if l.kernels.is_some() {
                            return Err(bad("pooling layers take no `kernels`"));
                        }
                        if l.activation != Activation::Linear {
                            return Err(bad("pooling layers have no activation"));
                        }
                        if l.pad != 0 {
                            return Err(bad("pooling layers take no padding"));
                        }
                        (dims.depth, 0)
                    };
                    LayerShape {
                        kind,
                        input: dims,
                        output: Dims::square(edge, depth),
                        window: l.window,
                        stride: l.stride,
                        pad: l.pad,
                        window_depth: dims.depth,
                        filters,
                    }
                }
            };
            dims = shape.output;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_dims(&self) -> Result<Dims, ModelError> {
        Ok(self.shapes()?.last().expect("non-empty").output)
    }
}

/// Float weights of one conv or dense layer in canonical order: filter
/// major, and within a filter the data-buffer window order (line, position,
/// channel). Dense filters are the unit's weights over the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub index: usize,
    pub kind: LayerKind,
    pub filters: usize,
    pub window: usize,
    pub depth: usize,
    pub bias: Vec<f64>,
    pub kernels: Vec<f64>,
}

impl FloatLayer {
    pub fn filter_len(&self) -> usize {
        self.window * self.window * self.depth
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let n = self.filter_len();
        &self.kernels[k * n..(k + 1) * n]
    }

    fn check(&self, shape: &LayerShape) -> Result<(), ModelError> {
        let err = |reason: String| ModelError::WeightShape {
            layer: self.index,
            reason,
        };
        if self.filters != shape.filters || self.window != shape.window || self.depth != shape.window_depth {
            return Err(err(alloc::format!(
                "geometry [{}, {}, {}] does not match model [{}, {}, {}]",
                self.filters,
                self.window,
                self.depth,
                shape.filters,
                shape.window,
                shape.window_depth
            )));
        }
        if self.bias.len() != self.filters {
            return Err(err(alloc::format!(
                "{} biases for {} filters",
                self.bias.len(),
                self.filters
            )));
        }
        if self.kernels.len() != self.filters * self.filter_len() {
            return Err(err(alloc::format!(
                "{} kernel values, expected {}",
                self.kernels.len(),
                self.filters * self.filter_len()
            )));
        }
        Ok(())
    }
}

/// Quantized weights of one conv or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub index: usize,
    pub kind: LayerKind,
    pub format: FixedPointFormat,
    /// Real scale factor the outputs are multiplied by (1 without auto-scaling).
    pub scale: f64,
    pub scale_word: FixedWord,
    pub filters: usize,
    pub window: usize,
    pub depth: usize,
    pub bias: Vec<FixedWord>,
    /// `filters * filter_len` words, canonical order.
    pub kernels: Vec<FixedWord>,
}

impl LayerWeights {
    pub fn filter_len(&self) -> usize {
        self.window * self.window * self.depth
    }

    pub fn filter(&self, k: usize) -> &[FixedWord] {
        let n = self.filter_len();
        &self.kernels[k * n..(k + 1) * n]
    }

    /// Weight-buffer package stream for `filters` using `package_words`-wide
    /// packages.
    pub fn realigned(&self, filters: Range<usize>, package_words: usize) -> Vec<FixedWord> {
        realign(
            &self.bias,
            &self.kernels,
            self.filter_len(),
            filters,
            package_words,
            self.format,
        )
    }
}

/// Packages one filter occupies in the weight buffer, excluding its bias.
pub fn packages_per_filter(filter_len: usize, package_words: usize) -> usize {
    filter_len.div_ceil(package_words)
}

/// Realign filters into weight-buffer package order: one bias package per
/// filter (bias in the first word, zero padding), then each filter's words
/// in window order, zero padded to whole packages.
pub fn realign(
    bias: &[FixedWord],
    kernels: &[FixedWord],
    filter_len: usize,
    filters: Range<usize>,
    package_words: usize,
    format: FixedPointFormat,
) -> Vec<FixedWord> {
    assert!(package_words > 0);
    let ppf = packages_per_filter(filter_len, package_words);
    let zero = format.zero();
    let mut out = Vec::with_capacity(filters.len() * (ppf + 1) * package_words);
    for k in filters.clone() {
        out.push(bias[k]);
        out.extend(core::iter::repeat_n(zero, package_words - 1));
    }
    for k in filters {
        out.extend_from_slice(&kernels[k * filter_len..(k + 1) * filter_len]);
        out.extend(core::iter::repeat_n(zero, ppf * package_words - filter_len));
    }
    out
}

/// Inverse of [`realign`] for a stream covering `filters` filters. Returns
/// `(bias, kernels)`; padding words must be zero.
pub fn unalign(
    words: &[FixedWord],
    filters: usize,
    filter_len: usize,
    package_words: usize,
) -> Result<(Vec<FixedWord>, Vec<FixedWord>), &'static str> {
    if package_words == 0 {
        return Err("package width is zero");
    }
    let ppf = packages_per_filter(filter_len, package_words);
    if words.len() != filters * (ppf + 1) * package_words {
        return Err("stream length does not match geometry");
    }
    let (bias_part, kernel_part) = words.split_at(filters * package_words);
    let mut bias = Vec::with_capacity(filters);
    for pkg in bias_part.chunks(package_words) {
        if pkg[1..].iter().any(|w| w.raw() != 0) {
            return Err("nonzero bias package padding");
        }
        bias.push(pkg[0]);
    }
    let mut kernels = Vec::with_capacity(filters * filter_len);
    for f in kernel_part.chunks(ppf * package_words) {
        if f[filter_len..].iter().any(|w| w.raw() != 0) {
            return Err("nonzero kernel package padding");
        }
        kernels.extend_from_slice(&f[..filter_len]);
    }
    Ok((bias, kernels))
}

/// `max |w| / q_max`, or 1 when every weight is zero.
pub fn layer_scale(weights: &[f64], q_max: f64) -> f64 {
    let m = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if m == 0.0 {
        1.0
    } else {
        m / q_max
    }
}

/// Per-layer auto-scale factor for `format`.
pub fn compute_layer_scale(weights: &[f64], format: FixedPointFormat) -> f64 {
    layer_scale(weights, format.q_max())
}

/// Element-wise `w / scale`.
pub fn scale_weights(weights: &[f64], scale: f64) -> Result<Vec<f64>, ModelError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(ModelError::BadScale(scale));
    }
    Ok(weights.iter().map(|w| w / scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub format: FixedPointFormat,
    pub scale_format: FixedPointFormat,
    pub autoscale: bool,
}

impl PreprocessOptions {
    pub fn new(format: FixedPointFormat, autoscale: bool) -> Self {
        Self {
            format,
            scale_format: format,
            autoscale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    pub index: usize,
    pub scale: f64,
    /// Weights and biases whose value fell outside the format and saturated.
    pub saturated: usize,
}

fn quantize_counting(
    values: &[f64],
    format: FixedPointFormat,
    saturated: &mut usize,
) -> Result<Vec<FixedWord>, FxpError> {
    values
        .iter()
        .map(|&v| {
            let w = quantize(v, format)?;
            if v > format.q_max() + format.lsb() / 2.0 || v < format.q_min() - format.lsb() / 2.0 {
                *saturated += 1;
            }
            Ok(w)
        })
        .collect()
}

/// Quantize one layer, optionally auto-scaling it first. The bias is divided
/// by the same scale so the rescaled output still approximates `W a + b`.
pub fn preprocess_layer(layer: &FloatLayer, opts: PreprocessOptions) -> Result<(LayerWeights, LayerStats), ModelError> {
    let scale = if opts.autoscale {
        compute_layer_scale(&layer.kernels, opts.format)
    } else {
        1.0
    };
    let kernels = scale_weights(&layer.kernels, scale)?;
    let bias = scale_weights(&layer.bias, scale)?;
    let mut saturated = 0;
    let kernels = quantize_counting(&kernels, opts.format, &mut saturated)?;
    let bias = quantize_counting(&bias, opts.format, &mut saturated)?;
    let scale_word = quantize(scale, opts.scale_format)?;
    Ok((
        LayerWeights {
            index: layer.index,
            kind: layer.kind,
            format: opts.format,
            scale,
            scale_word,
            filters: layer.filters,
            window: layer.window,
            depth: layer.depth,
            bias,
            kernels,
        },
        LayerStats {
            index: layer.index,
            scale,
            saturated,
        },
    ))
}

/// Preprocess every weighted layer of `model`. `floats` holds one entry per
/// conv/dense layer, in model order.
pub fn preprocess_model(
    model: &ModelSpec,
    floats: &[FloatLayer],
    opts: PreprocessOptions,
) -> Result<(Vec<LayerWeights>, Vec<LayerStats>), ModelError> {
    let shapes = model.shapes()?;
    let weighted: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.has_weights())
        .map(|(i, _)| i)
        .collect();
    if weighted.len() != floats.len() {
        return Err(ModelError::WeightShape {
            layer: floats.len(),
            reason: alloc::format!("{} weight layers supplied, model has {}", floats.len(), weighted.len()),
        });
    }
    let mut out = Vec::with_capacity(floats.len());
    let mut stats = Vec::with_capacity(floats.len());
    for (&i, f) in weighted.iter().zip(floats) {
        if f.index != i || f.kind != model.layers[i].kind {
            return Err(ModelError::WeightShape {
                layer: f.index,
                reason: alloc::format!("expected weights for layer {i} ({:?})", model.layers[i].kind),
            });
        }
        f.check(&shapes[i])?;
        let (w, s) = preprocess_layer(f, opts)?;
        out.push(w);
        stats.push(s);
    }
    Ok((out, stats))
}

/// Check that `weights` covers exactly the weighted layers of `model`.
pub fn check_weights(model: &ModelSpec, weights: &[LayerWeights]) -> Result<(), ModelError> {
    let shapes = model.shapes()?;
    let mut it = weights.iter();
    for (i, shape) in shapes.iter().enumerate() {
        if !model.layers[i].kind.has_weights() {
            continue;
        }
        let w = it.next().ok_or(ModelError::WeightShape {
            layer: i,
            reason: "missing".into(),
        })?;
        let ok = w.index == i
            && w.kind == model.layers[i].kind
            && w.filters == shape.filters
            && w.window == shape.window
            && w.depth == shape.window_depth
            && w.bias.len() == w.filters
            && w.kernels.len() == w.filters * w.filter_len();
        if !ok {
            return Err(ModelError::WeightShape {
                layer: i,
                reason: "geometry does not match model".into(),
            });
        }
    }
    if let Some(w) = it.next() {
        return Err(ModelError::WeightShape {
            layer: w.index,
            reason: "no such weighted layer in model".into(),
        });
    }
    Ok(())
}
