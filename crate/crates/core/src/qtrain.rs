//! Quantization-aware SGD on a toy problem.
//!
//! Naive quantized SGD stores only the quantized weights, so any update
//! smaller than half an LSB is rounded away and the weights freeze. Lazy
//! SGD keeps a float master copy `W`, applies updates there and re-derives
//! the forward copy `WQ = quantize(W)` after every step.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::fxp::{quantize, FixedPointFormat, FixedWord};
use crate::model::{compute_layer_scale, Activation};
use crate::oracle::fixed_neuron_clipped;

/// `W <- quantize(W - lr * grad)` on stored fixed-point weights.
pub fn sgd_step_naive(w: &[FixedWord], grad: &[f64], lr: f64) -> Vec<FixedWord> {
    assert_eq!(w.len(), grad.len());
    w.iter()
        .zip(grad)
        .map(|(&q, &g)| quantize(q.to_f64() - lr * g, q.format()).expect("finite update"))
        .collect()
}

/// Float master weights plus their quantized forward copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowWeights {
    pub w: Vec<f64>,
    pub wq: Vec<FixedWord>,
    pub lr: f64,
    pub format: FixedPointFormat,
    /// Updates applied so far.
    pub steps: u64,
}

impl ShadowWeights {
    pub fn new(w: Vec<f64>, lr: f64, format: FixedPointFormat) -> Self {
        let wq = quantize_all(&w, format);
        Self {
            w,
            wq,
            lr,
            format,
            steps: 0,
        }
    }
}

fn quantize_all(w: &[f64], format: FixedPointFormat) -> Vec<FixedWord> {
    w.iter().map(|&v| quantize(v, format).expect("finite weight")).collect()
}

/// `W <- W - lr * grad` in float, then `WQ <- quantize(W)`.
pub fn sgd_step_lazy(sw: &mut ShadowWeights, grad: &[f64]) {
    assert_eq!(sw.w.len(), grad.len());
    for (w, g) in sw.w.iter_mut().zip(grad) {
        *w -= sw.lr * g;
    }
    sw.wq = quantize_all(&sw.w, sw.format);
    sw.steps += 1;
}

/// Lazy steps of constant size `step` (`lr * grad`, either sign) until the
/// quantized value of `w` changes, or `None` if it never does. Assumes
/// round half away from zero.
pub fn lazy_steps_to_change(w: f64, step: f64, format: FixedPointFormat) -> Option<u64> {
    if step == 0.0 {
        return None;
    }
    let q = quantize(w, format).ok()?.to_f64();
    let half = format.lsb() / 2.0;
    let down = step > 0.0;
    if (down && q <= format.q_min()) || (!down && q >= format.q_max()) {
        return None;
    }
    // Distance to the rounding boundary. A tie rounds away from zero, so the
    // boundary value itself still maps to `q` on the side nearer zero.
    let (boundary, tie_stays) = if down { (q - half, q > 0.0) } else { (q + half, q < 0.0) };
    let dist = (w - boundary).abs();
    let n = dist / step.abs();
    let whole = libm::floor(n);
    let steps = if whole == n && !tie_stays { whole } else { whole + 1.0 };
    Some(steps.max(1.0) as u64)
}

/// Seeded Gaussian blobs on a circle of radius 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Blobs {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Blobs {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Generate `per_class` points per class and split off `val_per_class` of
/// each class for validation.
pub fn blobs(seed: u64, classes: usize, per_class: usize, val_per_class: usize, spread: f64) -> (Blobs, Blobs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).expect("positive spread");
    let mut train = Blobs {
        x: Vec::new(),
        y: Vec::new(),
        classes,
    };
    let mut val = train.clone();
    for c in 0..classes {
        let a = 2.0 * core::f64::consts::PI * c as f64 / classes as f64;
        let (cx, cy) = (libm::cos(a), libm::sin(a));
        for i in 0..per_class {
            let p = [cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)];
            let set = if i < val_per_class { &mut val } else { &mut train };
            set.x.push(p);
            set.y.push(c);
        }
    }
    (train, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Precision {
    Float,
    Fixed {
        format: FixedPointFormat,
        lazy: bool,
        autoscale: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub precision: Precision,
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub val_per_class: usize,
    pub spread: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Samples of each class per mini-batch.
    pub batch_per_class: usize,
    /// Initial weights are uniform in `[-init, init]`; biases start at zero.
    pub init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            precision: Precision::Float,
            seed: 7,
            classes: 4,
            per_class: 150,
            val_per_class: 30,
            spread: 0.25,
            hidden: 16,
            epochs: 60,
            lr: 0.2,
            batch_per_class: 8,
            init: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> EpochRecord {
        *self.curve.last().expect("at least one epoch")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Invalid(&'static str),
}

/// One fully connected layer: real master weights and their forward copy.
#[derive(Debug, Clone)]
struct Layer {
    inputs: usize,
    outputs: usize,
    act: Activation,
    w: Vec<f64>,
    b: Vec<f64>,
    wq: Vec<FixedWord>,
    bq: Vec<FixedWord>,
    scale: f64,
    scale_word: Option<FixedWord>,
}

impl Layer {
    fn new(inputs: usize, outputs: usize, act: Activation, init: f64, rng: &mut ChaCha8Rng) -> Self {
        let u = Uniform::new_inclusive(-init, init).expect("valid range");
        Self {
            inputs,
            outputs,
            act,
            w: (0..inputs * outputs).map(|_| u.sample(rng)).collect(),
            b: vec![0.0; outputs],
            wq: Vec::new(),
            bq: Vec::new(),
            scale: 1.0,
            scale_word: None,
        }
    }

    /// Re-derive the forward copy from the master weights.
    fn requantize(&mut self, format: FixedPointFormat, autoscale: bool) {
        self.scale = if autoscale {
            compute_layer_scale(&self.w, format)
        } else {
            1.0
        };
        let s = self.scale;
        self.wq = self
            .w
            .iter()
            .map(|&v| quantize(v / s, format).expect("finite"))
            .collect();
        self.bq = self
            .b
            .iter()
            .map(|&v| quantize(v / s, format).expect("finite"))
            .collect();
        self.scale_word = Some(quantize(s, format).expect("finite"));
    }

    /// Replace the master weights by the real value of the forward copy.
    fn snap_to_forward(&mut self) {
        let s = self.scale;
        self.w = self.wq.iter().map(|q| q.to_f64() * s).collect();
        self.b = self.bq.iter().map(|q| q.to_f64() * s).collect();
    }

    /// Real weights the forward pass effectively uses.
    fn effective(&self, k: usize) -> f64 {
        match self.scale_word {
            Some(sw) => self.wq[k].to_f64() * sw.to_f64(),
            None => self.w[k],
        }
    }

    fn forward_float(&self, a: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
                let z: f64 = row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + self.b[o];
                self.act.apply(z)
            })
            .collect()
    }

    /// Outputs and, per output, whether the word saturated.
    fn forward_fixed(&self, a: &[FixedWord]) -> (Vec<FixedWord>, Vec<bool>) {
        let sw = self.scale_word.expect("quantized layer");
        (0..self.outputs)
            .map(|o| {
                let row = &self.wq[o * self.inputs..(o + 1) * self.inputs];
                fixed_neuron_clipped(a, row, self.bq[o], sw, self.act)
            })
            .unzip()
    }
}

struct Mlp {
    layers: [Layer; 2],
    precision: Precision,
}

/// Activations of every layer as reals (input first), plus the saturation
/// flags of the hidden and output layers.
struct Trace {
    acts: [Vec<f64>; 3],
    clipped: [Vec<bool>; 2],
}

impl Mlp {
    fn forward(&self, x: &[f64; 2]) -> Trace {
        match self.precision {
            Precision::Float => {
                let h = self.layers[0].forward_float(x);
                let o = self.layers[1].forward_float(&h);
                let clipped = [vec![false; h.len()], vec![false; o.len()]];
                Trace {
                    acts: [x.to_vec(), h, o],
                    clipped,
                }
            }
            Precision::Fixed { format, .. } => {
                let xq: Vec<FixedWord> = x.iter().map(|&v| quantize(v, format).expect("finite")).collect();
                let (h, ch) = self.layers[0].forward_fixed(&xq);
                let (o, co) = self.layers[1].forward_fixed(&h);
                let real = |v: &[FixedWord]| v.iter().map(|w| w.to_f64()).collect();
                Trace {
                    acts: [real(&xq), real(&h), real(&o)],
                    clipped: [ch, co],
                }
            }
        }
    }

    /// Straight-through gradients of the cross-entropy for one sample,
    /// accumulated into `grads` (weights then biases per layer). Rounding
    /// passes the gradient unchanged; a saturated output passes none.
    fn backward(&self, trace: &Trace, label: usize, grads: &mut [(Vec<f64>, Vec<f64>); 2]) {
        let mut delta = softmax(&trace.acts[2]);
        delta[label] -= 1.0;
        for li in (0..2).rev() {
            let layer = &self.layers[li];
            let input = &trace.acts[li];
            for (d, &c) in delta.iter_mut().zip(&trace.clipped[li]) {
                if c {
                    *d = 0.0;
                }
            }
            let (gw, gb) = &mut grads[li];
            for o in 0..layer.outputs {
                gb[o] += delta[o];
                for i in 0..layer.inputs {
                    gw[o * layer.inputs + i] += delta[o] * input[i];
                }
            }
            if li == 0 {
                break;
            }
            let mut next = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                for (i, n) in next.iter_mut().enumerate() {
                    *n += d * layer.effective(o * layer.inputs + i);
                }
            }
            // ReLU derivative from the forward activations.
            for (n, a) in next.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }

    fn update(&mut self, grads: &[(Vec<f64>, Vec<f64>); 2], lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            match self.precision {
                Precision::Float => {
                    step(&mut layer.w, gw, lr);
                    step(&mut layer.b, gb, lr);
                }
                Precision::Fixed {
                    format,
                    lazy,
                    autoscale,
                } => {
                    if !lazy {
                        layer.snap_to_forward();
                    }
                    step(&mut layer.w, gw, lr);
                    step(&mut layer.b, gb, lr);
                    layer.requantize(format, autoscale);
                    if !lazy {
                        layer.snap_to_forward();
                    }
                }
            }
        }
    }
}

fn step(w: &mut [f64], g: &[f64], lr: f64) {
    for (w, g) in w.iter_mut().zip(g) {
        *w -= lr * g;
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the first one wins ties.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn evaluate(net: &Mlp, data: &Blobs) -> (f64, f64) {
    let mut correct = 0;
    let mut loss = 0.0;
    for (x, &y) in data.x.iter().zip(&data.y) {
        let t = net.forward(x);
        let out = &t.acts[2];
        if argmax(out) == y {
            correct += 1;
        }
        loss -= libm::log(softmax(out)[y].max(1e-300));
    }
    let n = data.len().max(1) as f64;
    (correct as f64 / n, loss / n)
}

/// Train a 2-hidden-output MLP on seeded blobs and return the per-epoch
/// accuracy curve. In fixed-point modes the forward pass, including the
/// reported accuracies, runs only on quantized weights and activations.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    if cfg.classes < 2 || cfg.per_class <= cfg.val_per_class || cfg.hidden == 0 || cfg.batch_per_class == 0 {
        return Err(TrainError::Invalid(
            "need two classes, training samples, hidden units and a batch",
        ));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite() && cfg.spread > 0.0 && cfg.init >= 0.0) {
        return Err(TrainError::Invalid("learning rate and spread must be positive"));
    }
    let (train, val) = blobs(cfg.seed, cfg.classes, cfg.per_class, cfg.val_per_class, cfg.spread);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut net = Mlp {
        layers: [
            Layer::new(2, cfg.hidden, Activation::Relu, cfg.init, &mut rng),
            Layer::new(cfg.hidden, cfg.classes, Activation::Linear, cfg.init, &mut rng),
        ],
        precision: cfg.precision,
    };
    if let Precision::Fixed {
        format,
        lazy,
        autoscale,
    } = cfg.precision
    {
        for l in &mut net.layers {
            l.requantize(format, autoscale);
            if !lazy {
                l.snap_to_forward();
            }
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.classes];
    for (i, &y) in train.y.iter().enumerate() {
        by_class[y].push(i);
    }
    let per_class_train = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let batches = per_class_train / cfg.batch_per_class;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        for c in &mut by_class {
            c.shuffle(&mut rng);
        }
        for b in 0..batches {
            let mut grads = [
                (vec![0.0; 2 * cfg.hidden], vec![0.0; cfg.hidden]),
                (vec![0.0; cfg.hidden * cfg.classes], vec![0.0; cfg.classes]),
            ];
            let mut n = 0;
            for c in &by_class {
                for &i in &c[b * cfg.batch_per_class..(b + 1) * cfg.batch_per_class] {
                    let t = net.forward(&train.x[i]);
                    net.backward(&t, train.y[i], &mut grads);
                    n += 1;
                }
            }
            for (gw, gb) in &mut grads {
                gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g /= n as f64);
            }
            net.update(&grads, cfg.lr);
        }
        let (train_acc, loss) = evaluate(&net, &train);
        let (val_acc, _) = evaluate(&net, &val);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch, loss });
        }
        curve.push(EpochRecord {
            epoch,
            train_acc,
            val_acc,
            loss,
        });
    }
    Ok(TrainReport { curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q26: FixedPointFormat = FixedPointFormat::Q2_6;

    #[test]
    fn naive_update_freezes_below_half_lsb() {
        let w = vec![quantize(1.671875, Q26).unwrap()];
        let next = sgd_step_naive(&w, &[0.0015624], 1.0);
        assert_eq!(next, w);
        assert_eq!(next[0].to_f64(), 1.671875);
    }

    #[test]
    fn one_lsb_update_moves_one_lsb() {
        let w = vec![quantize(0.5, Q26).unwrap()];
        let next = sgd_step_naive(&w, &[1.0], Q26.lsb());
        assert_eq!(next[0].raw(), w[0].raw() - 1);
    }

    #[test]
    fn lazy_update_escapes_after_computed_steps() {
        let step = 0.0015624;
        let expected = lazy_steps_to_change(1.671875, step, Q26).unwrap();
        assert_eq!(expected, 6);
        let mut sw = ShadowWeights::new(vec![1.671875], 1.0, Q26);
        let start = sw.wq.clone();
        for i in 1..=expected {
            sgd_step_lazy(&mut sw, &[step]);
            assert_eq!(sw.wq == start, i < expected, "step {i}");
        }
        assert_eq!(sw.wq[0].raw(), 106);
    }

    #[test]
    fn zero_gradient_keeps_both_copies() {
        let mut sw = ShadowWeights::new(vec![0.3, -1.2], 0.1, Q26);
        let before = sw.clone();
        sgd_step_lazy(&mut sw, &[0.0, 0.0]);
        assert_eq!(sw.w, before.w);
        assert_eq!(sw.wq, before.wq);
    }

    #[test]
    fn naive_quantized_training_stays_at_chance() {
        let cfg = TrainConfig {
            precision: Precision::Fixed {
                format: Q26,
                lazy: false,
                autoscale: false,
            },
            epochs: 5,
            ..Default::default()
        };
        let r = train_toy(&cfg).unwrap();
        assert!(r.curve.iter().all(|e| (e.train_acc - 0.25).abs() < 1e-12));
    }

    #[test]
    fn float_training_converges() {
        let r = train_toy(&TrainConfig {
            epochs: 30,
            ..Default::default()
        })
        .unwrap();
        assert!(r.last().train_acc >= 0.95, "{:?}", r.last());
    }

    proptest! {
        #[test]
        fn lazy_step_count_matches_simulation(raw in -120i64..120, step_lsb in 0.01f64..3.0, down in any::<bool>()) {
            let w0 = raw as f64 * Q26.lsb();
            let step = if down { step_lsb * Q26.lsb() } else { -step_lsb * Q26.lsb() };
            let n = lazy_steps_to_change(w0, step, Q26).unwrap();
            let mut sw = ShadowWeights::new(vec![w0], 1.0, Q26);
            let start = sw.wq[0];
            let mut k = 0;
            while sw.wq[0] == start {
                sgd_step_lazy(&mut sw, &[step]);
                k += 1;
                prop_assert!(k <= n);
            }
            prop_assert_eq!(k, n);
        }

        #[test]
        fn sub_half_lsb_updates_freeze_everything(
            raws in proptest::collection::vec(-128i64..128, 1..20),
            frac in proptest::collection::vec(-0.499f64..0.499, 20),
        ) {
            let w: Vec<_> = raws.iter().map(|&r| Q26.word(r).unwrap()).collect();
            let g: Vec<_> = frac[..w.len()].iter().map(|f| f * Q26.lsb()).collect();
            let mut cur = w.clone();
            for _ in 0..50 {
                cur = sgd_step_naive(&cur, &g, 1.0);
            }
            prop_assert_eq!(cur, w);
        }

        #[test]
        fn lazy_is_linear_in_the_gradient(w0 in -1.5f64..1.5, g in -0.01f64..0.01, k in 1usize..20) {
            let mut many = ShadowWeights::new(vec![w0], 1.0, Q26);
            for _ in 0..k {
                sgd_step_lazy(&mut many, &[g]);
            }
            let mut one = ShadowWeights::new(vec![w0], 1.0, Q26);
            sgd_step_lazy(&mut one, &[g * k as f64]);
            prop_assert!((many.w[0] - one.w[0]).abs() < 1e-12);
            // Rounding of the master copy can only differ at an exact tie.
            prop_assert!((many.wq[0].raw() - one.wq[0].raw()).abs() <= 1);
        }
    }
}
