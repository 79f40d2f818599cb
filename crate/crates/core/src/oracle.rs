//! Direct reference implementations of every layer kind, in float and in
//! fixed point. They share no code with [`crate::accel`]: windows are
//! gathered by index arithmetic and each output word is computed on its own.

use alloc::vec::Vec;

use crate::fxp::{div_round, FixedPointFormat, FixedWord, Rounding, WideAccum};
use crate::model::{
    check_weights, Activation, FloatLayer, LayerKind, LayerShape, LayerWeights, ModelError, ModelSpec, PoolKind,
};
use crate::tensor::{Dims, Tensor};

/// The zero-padded window with top-left output position `(ox, oy)`, in
/// window order (line, position, channel).
pub fn window_at<T: Copy>(
    input: &Tensor<T>,
    zero: T,
    ox: usize,
    oy: usize,
    window: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let d = input.dims();
    let mut out = Vec::with_capacity(window * window * d.depth);
    for wx in 0..window {
        for wy in 0..window {
            let x = (ox * stride + wx) as isize - pad as isize;
            let y = (oy * stride + wy) as isize - pad as isize;
            let inside = x >= 0 && y >= 0 && (x as usize) < d.cols && (y as usize) < d.rows;
            for z in 0..d.depth {
                out.push(if inside {
                    *input.get(x as usize, y as usize, z)
                } else {
                    zero
                });
            }
        }
    }
    out
}

fn output_dims(shape: &LayerShape) -> Dims {
    shape.output
}

/// Fixed-point output of one filter over one window: exact dot product plus
/// bias, rounded to the word format, multiplied by the scale word, rounded
/// again, then activated.
pub fn fixed_neuron(
    window: &[FixedWord],
    filter: &[FixedWord],
    bias: FixedWord,
    scale: FixedWord,
    act: Activation,
) -> FixedWord {
    fixed_neuron_clipped(window, filter, bias, scale, act).0
}

/// [`fixed_neuron`] that also reports whether either rounding step hit the
/// edge of the format.
pub fn fixed_neuron_clipped(
    window: &[FixedWord],
    filter: &[FixedWord],
    bias: FixedWord,
    scale: FixedWord,
    act: Activation,
) -> (FixedWord, bool) {
    let format = bias.format();
    let mut acc = WideAccum::for_products(format);
    for (&x, &w) in window.iter().zip(filter) {
        acc.mac(x, w);
    }
    acc.add_word(bias);
    let q1 = acc.to_word(format);
    let q2 = q1.wide_mul(scale).to_word(format);
    (act.apply_word(q2), q1.is_saturated() || q2.is_saturated())
}

pub fn conv_fixed(
    input: &Tensor<FixedWord>,
    shape: &LayerShape,
    w: &LayerWeights,
    act: Activation,
) -> Tensor<FixedWord> {
    let od = output_dims(shape);
    let zero = w.format.zero();
    let mut out = Vec::with_capacity(od.len());
    for ox in 0..od.cols {
        for oy in 0..od.rows {
            let win = window_at(input, zero, ox, oy, shape.window, shape.stride, shape.pad);
            for k in 0..w.filters {
                out.push(fixed_neuron(&win, w.filter(k), w.bias[k], w.scale_word, act));
            }
        }
    }
    Tensor::from_vec(od, out).expect("output dims")
}

pub fn dense_fixed(input: &Tensor<FixedWord>, w: &LayerWeights, act: Activation) -> Tensor<FixedWord> {
    let out = (0..w.filters)
        .map(|k| fixed_neuron(input.data(), w.filter(k), w.bias[k], w.scale_word, act))
        .collect();
    Tensor::from_vec(Dims::vector(w.filters), out).expect("output dims")
}

/// Reduce a set of same-format words. Max and min keep the first of equal
/// values; average rounds the exact mean.
pub fn pool_values(kind: PoolKind, vals: &[FixedWord]) -> FixedWord {
    let mut best = vals[0];
    match kind {
        PoolKind::Max => {
            for &v in &vals[1..] {
                if v.raw() > best.raw() {
                    best = v;
                }
            }
            best
        }
        PoolKind::Min => {
            for &v in &vals[1..] {
                if v.raw() < best.raw() {
                    best = v;
                }
            }
            best
        }
        PoolKind::Avg => {
            let sum: i128 = vals.iter().map(|v| v.raw() as i128).sum();
            FixedWord::saturating_from_raw(div_round(sum, vals.len() as i128, Rounding::default()), best.format())
        }
    }
}

pub fn pool_fixed(input: &Tensor<FixedWord>, shape: &LayerShape, kind: PoolKind) -> Tensor<FixedWord> {
    let od = output_dims(shape);
    let depth = input.dims().depth;
    let zero = input[0].format().zero();
    let mut out = Vec::with_capacity(od.len());
    for ox in 0..od.cols {
        for oy in 0..od.rows {
            let win = window_at(input, zero, ox, oy, shape.window, shape.stride, shape.pad);
            for z in 0..depth {
                let vals: Vec<FixedWord> = win.iter().skip(z).step_by(depth).copied().collect();
                out.push(pool_values(kind, &vals));
            }
        }
    }
    Tensor::from_vec(od, out).expect("output dims")
}

pub fn conv_float(input: &Tensor<f64>, shape: &LayerShape, w: &FloatLayer, act: Activation) -> Tensor<f64> {
    let od = output_dims(shape);
    let mut out = Vec::with_capacity(od.len());
    for ox in 0..od.cols {
        for oy in 0..od.rows {
            let win = window_at(input, 0.0, ox, oy, shape.window, shape.stride, shape.pad);
            for k in 0..w.filters {
                let dot: f64 = win.iter().zip(w.filter(k)).map(|(a, b)| a * b).sum();
                out.push(act.apply(dot + w.bias[k]));
            }
        }
    }
    Tensor::from_vec(od, out).expect("output dims")
}

pub fn dense_float(input: &Tensor<f64>, w: &FloatLayer, act: Activation) -> Tensor<f64> {
    let out = (0..w.filters)
        .map(|k| {
            let dot: f64 = input.data().iter().zip(w.filter(k)).map(|(a, b)| a * b).sum();
            act.apply(dot + w.bias[k])
        })
        .collect();
    Tensor::from_vec(Dims::vector(w.filters), out).expect("output dims")
}

pub fn pool_float(input: &Tensor<f64>, shape: &LayerShape, kind: PoolKind) -> Tensor<f64> {
    let od = output_dims(shape);
    let depth = input.dims().depth;
    let mut out = Vec::with_capacity(od.len());
    for ox in 0..od.cols {
        for oy in 0..od.rows {
            let win = window_at(input, 0.0, ox, oy, shape.window, shape.stride, shape.pad);
            for z in 0..depth {
                let vals = win.iter().skip(z).step_by(depth);
                out.push(match kind {
                    PoolKind::Max => vals.fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
                    PoolKind::Min => vals.fold(f64::INFINITY, |m, &v| m.min(v)),
                    PoolKind::Avg => vals.sum::<f64>() / (shape.window * shape.window) as f64,
                });
            }
        }
    }
    Tensor::from_vec(od, out).expect("output dims")
}

/// Run a whole model in fixed point. Returns every layer's output.
pub fn model_fixed(
    model: &ModelSpec,
    weights: &[LayerWeights],
    input: &Tensor<FixedWord>,
) -> Result<Vec<Tensor<FixedWord>>, ModelError> {
    check_weights(model, weights)?;
    let shapes = model.shapes()?;
    let mut w = weights.iter();
    let mut cur = input.clone();
    let mut outs = Vec::with_capacity(shapes.len());
    for (spec, shape) in model.layers.iter().zip(&shapes) {
        cur = match spec.kind {
            LayerKind::Conv => conv_fixed(&cur, shape, w.next().expect("checked"), spec.activation),
            LayerKind::Dense => dense_fixed(&cur, w.next().expect("checked"), spec.activation),
            k => pool_fixed(&cur, shape, k.pool().expect("pool kind")),
        };
        outs.push(cur.clone());
    }
    Ok(outs)
}

/// Run a whole model in float. `floats` holds the conv and dense layers in
/// order. Returns every layer's output.
pub fn model_float(
    model: &ModelSpec,
    floats: &[FloatLayer],
    input: &Tensor<f64>,
) -> Result<Vec<Tensor<f64>>, ModelError> {
    let shapes = model.shapes()?;
    let mut w = floats.iter();
    let mut cur = input.clone();
    let mut outs = Vec::with_capacity(shapes.len());
    for (i, (spec, shape)) in model.layers.iter().zip(&shapes).enumerate() {
        let mut next_weights = || {
            w.next().ok_or(ModelError::WeightShape {
                layer: i,
                reason: "missing".into(),
            })
        };
        cur = match spec.kind {
            LayerKind::Conv => conv_float(&cur, shape, next_weights()?, spec.activation),
            LayerKind::Dense => dense_float(&cur, next_weights()?, spec.activation),
            k => pool_float(&cur, shape, k.pool().expect("pool kind")),
        };
        outs.push(cur.clone());
    }
    Ok(outs)
}

pub fn quantize_tensor(t: &Tensor<f64>, format: FixedPointFormat) -> Result<Tensor<FixedWord>, crate::fxp::FxpError> {
    let data = t
        .data()
        .iter()
        .map(|&v| crate::fxp::quantize(v, format))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::from_vec(t.dims(), data).expect("same dims"))
}
