//! Host-side control: split layers whose kernels do not fit the weight
//! buffer into passes and stitch the pass outputs back together.
//!
//! Conv passes stitch through XBUF: pass `i` reads the output of pass
//! `i - 1` and writes every pixel as the old words followed by its own
//! kernels, so two buffers are used alternately. Dense passes produce one
//! pixel each and are appended to a single buffer.

use alloc::vec::Vec;
use core::ops::Range;

use crate::accel::{cnna_execute, CnnaConfig, ExecOptions, Fault, LayerCtrl, RunStats, SplitInfo, TraceEvent};
use crate::fxp::FixedWord;
use crate::model::{
    check_weights, packages_per_filter, Activation, LayerKind, LayerShape, LayerWeights, ModelError, ModelSpec,
    PoolKind,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("layer {layer}: kernel too large for configuration ({packages} packages, buffer holds {capacity})")]
    KernelTooLarge {
        layer: usize,
        packages: usize,
        capacity: usize,
    },
    #[error("input has {got} words, model expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("layer {layer} pass {pass}: {fault}")]
    Fault { layer: usize, pass: usize, fault: Fault },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassPlan {
    pub ctrl: LayerCtrl,
    pub filters: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub index: usize,
    pub kind: LayerKind,
    pub shape: LayerShape,
    /// Index into the weight list, for conv and dense layers.
    pub weights: Option<usize>,
    pub passes: Vec<PassPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub cfg: CnnaConfig,
    pub layers: Vec<LayerPlan>,
}

impl ExecutionPlan {
    pub fn pass_count(&self) -> usize {
        self.layers.iter().map(|l| l.passes.len()).sum()
    }
}

/// Kernels (with their bias packages) that fit the weight buffer at once.
pub fn kernels_per_pass(cfg: &CnnaConfig, filter_len: usize) -> usize {
    cfg.wb_packages / (packages_per_filter(filter_len, cfg.package_words()) + 1)
}

/// Cut `filters` kernels into passes of at most `per_pass`.
pub fn split_ranges(filters: usize, per_pass: usize) -> Vec<Range<usize>> {
    assert!(per_pass > 0);
    (0..filters.div_ceil(per_pass))
        .map(|i| i * per_pass..((i + 1) * per_pass).min(filters))
        .collect()
}

/// Passes for one conv or dense layer.
pub fn plan_layer_passes(
    cfg: &CnnaConfig,
    index: usize,
    shape: &LayerShape,
    activation: Activation,
    scale: FixedWord,
    max_kernels_per_pass: usize,
) -> Result<Vec<PassPlan>, ScheduleError> {
    let per_pass = kernels_per_pass(cfg, shape.filter_len()).min(max_kernels_per_pass);
    if per_pass == 0 {
        return Err(ScheduleError::KernelTooLarge {
            layer: index,
            packages: packages_per_filter(shape.filter_len(), cfg.package_words()) + 1,
            capacity: cfg.wb_packages,
        });
    }
    let ranges = split_ranges(shape.filters, per_pass);
    let count = ranges.len();
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let base = match shape.kind {
                LayerKind::Dense => LayerCtrl::dense(cfg, shape.window_depth, r.len(), activation, scale),
                _ => LayerCtrl::conv(
                    cfg,
                    shape.input.rows,
                    shape.input.depth,
                    shape.window,
                    shape.stride,
                    shape.pad,
                    r.len(),
                    activation,
                    scale,
                ),
            };
            let offset = if shape.kind == LayerKind::Conv { r.start } else { 0 };
            PassPlan {
                ctrl: base.with_split(SplitInfo {
                    index: i,
                    count,
                    stitch_offset_words: offset,
                }),
                filters: r,
            }
        })
        .collect())
}

/// The single pass of a pooling layer.
pub fn plan_pool_pass(cfg: &CnnaConfig, shape: &LayerShape, kind: PoolKind) -> PassPlan {
    PassPlan {
        ctrl: LayerCtrl::pool(
            cfg,
            kind,
            shape.input.rows,
            shape.input.depth,
            shape.window,
            shape.stride,
        ),
        filters: 0..0,
    }
}

/// Plan every layer. `max_kernels_per_pass` caps the split size below what
/// the weight buffer allows.
pub fn plan_model_with(
    cfg: &CnnaConfig,
    model: &ModelSpec,
    weights: &[LayerWeights],
    max_kernels_per_pass: usize,
) -> Result<ExecutionPlan, ScheduleError> {
    cfg.validate().map_err(|fault| ScheduleError::Fault {
        layer: 0,
        pass: 0,
        fault,
    })?;
    check_weights(model, weights)?;
    let shapes = model.shapes()?;
    let mut next_w = 0;
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, (spec, shape)) in model.layers.iter().zip(&shapes).enumerate() {
        let (passes, widx) = match spec.kind.pool() {
            Some(kind) => (alloc::vec![plan_pool_pass(cfg, shape, kind)], None),
            None => {
                let scale = weights[next_w].scale_word;
                next_w += 1;
                let passes = plan_layer_passes(cfg, i, shape, spec.activation, scale, max_kernels_per_pass)?;
                (passes, Some(next_w - 1))
            }
        };
        layers.push(LayerPlan {
            index: i,
            kind: spec.kind,
            shape: *shape,
            weights: widx,
            passes,
        });
    }
    Ok(ExecutionPlan { cfg: *cfg, layers })
}

pub fn plan_model(
    cfg: &CnnaConfig,
    model: &ModelSpec,
    weights: &[LayerWeights],
) -> Result<ExecutionPlan, ScheduleError> {
    plan_model_with(cfg, model, weights, usize::MAX)
}

#[derive(Debug, Clone)]
pub struct PassRecord {
    pub layer: usize,
    pub pass: usize,
    pub stats: RunStats,
    pub modeled_cycles: u64,
    pub trace: Option<Vec<TraceEvent>>,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// Output of every layer, raster order.
    pub layers: Vec<Vec<FixedWord>>,
    pub passes: Vec<PassRecord>,
}

impl InferenceOutput {
    pub fn output(&self) -> &[FixedWord] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn modeled_cycles(&self) -> u64 {
        self.passes.iter().map(|p| p.modeled_cycles).sum()
    }
}

/// Run a planned model on the accelerator model.
pub fn run_inference(
    plan: &ExecutionPlan,
    weights: &[LayerWeights],
    input: &[FixedWord],
    opts: &ExecOptions,
) -> Result<InferenceOutput, ScheduleError> {
    let expected = plan.layers.first().map(|l| l.shape.input.len()).unwrap_or(0);
    if input.len() != expected {
        return Err(ScheduleError::InputLength {
            expected,
            got: input.len(),
        });
    }
    let cfg = &plan.cfg;
    let p = cfg.package_words();
    let mut cur: Vec<FixedWord> = input.to_vec();
    let mut layers = Vec::with_capacity(plan.layers.len());
    let mut records = Vec::new();
    for layer in &plan.layers {
        let mut ping: Vec<FixedWord> = Vec::new();
        let mut appended: Vec<FixedWord> = Vec::new();
        for (pi, pass) in layer.passes.iter().enumerate() {
            let w = match layer.weights {
                Some(i) => weights[i].realigned(pass.filters.clone(), p),
                None => Vec::new(),
            };
            let xbuf: &[FixedWord] = if pass.ctrl.split.stitch_offset_words > 0 {
                &ping
            } else {
                &[]
            };
            let out = cnna_execute(cfg, &pass.ctrl, &cur, &w, xbuf, opts).map_err(|fault| ScheduleError::Fault {
                layer: layer.index,
                pass: pi,
                fault,
            })?;
            records.push(PassRecord {
                layer: layer.index,
                pass: pi,
                stats: out.stats,
                modeled_cycles: out.modeled_cycles,
                trace: out.trace,
            });
            if layer.kind == LayerKind::Dense {
                appended.extend(out.y);
            } else {
                ping = out.y;
            }
        }
        cur = if layer.kind == LayerKind::Dense { appended } else { ping };
        layers.push(cur.clone());
    }
    Ok(InferenceOutput {
        layers,
        passes: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{FixedPointFormat, FixedWord};
    use crate::model::{LayerSpec, PreprocessOptions};
    use crate::oracle;
    use crate::tensor::Tensor;
    use alloc::string::String;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(pe_count: usize, wb_packages: usize) -> CnnaConfig {
        CnnaConfig {
            format: FixedPointFormat::Q2_14,
            pe_count,
            pe_bw: 4,
            db_out: 2,
            wb_packages,
        }
    }

    fn random_weights(m: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<LayerWeights> {
        let floats: Vec<_> = m
            .shapes()
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind.has_weights())
            .map(|(i, s)| crate::model::FloatLayer {
                index: i,
                kind: s.kind,
                filters: s.filters,
                window: s.window,
                depth: s.window_depth,
                bias: (0..s.filters).map(|_| rng.random_range(-0.5..0.5)).collect(),
                kernels: (0..s.filters * s.filter_len())
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect(),
            })
            .collect();
        crate::model::preprocess_model(m, &floats, PreprocessOptions::new(FixedPointFormat::Q2_14, true))
            .unwrap()
            .0
    }

    fn random_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<FixedWord> {
        (0..n)
            .map(|_| FixedWord::saturating_from_raw(rng.random_range(-16384..16384), FixedPointFormat::Q2_14))
            .collect()
    }

    #[test]
    fn wb_capacity_for_reference_beta() {
        let c = CnnaConfig {
            format: FixedPointFormat::Q2_6,
            pe_count: 8,
            pe_bw: 128,
            db_out: 3,
            wb_packages: (3 * 3 * 512usize).div_ceil(384) + 1,
        };
        assert_eq!(c.wb_packages, 13);
        assert_eq!(c.wb_packages * 42, 546);
        assert_eq!(kernels_per_pass(&CnnaConfig { wb_packages: 546, ..c }, 3 * 3 * 512), 42);
    }

    #[test]
    fn eight_kernels_capacity_four_is_two_passes() {
        let m = ModelSpec {
            name: String::from("c"),
            input: [5, 5, 2],
            layers: vec![LayerSpec::conv(8, 3, 1, 0, Activation::Relu)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&m, &mut rng);
        // 18 words in packages of 8 -> 3 + 1 packages per kernel.
        let plan = plan_model(&cfg(3, 16), &m, &w).unwrap();
        assert_eq!(plan.layers[0].passes.len(), 2);
        assert_eq!(plan.layers[0].passes[1].ctrl.split.stitch_offset_words, 4);
        let x = random_input(50, &mut rng);
        let got = run_inference(&plan, &w, &x, &ExecOptions::default()).unwrap();
        let t = Tensor::from_vec(m.input_dims(), x).unwrap();
        let want = oracle::model_fixed(&m, &w, &t).unwrap();
        assert_eq!(got.output(), want[0].data());
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let m = ModelSpec {
            name: String::from("c"),
            input: [5, 5, 8],
            layers: vec![LayerSpec::conv(2, 3, 1, 0, Activation::Relu)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&m, &mut rng);
        let err = plan_model(&cfg(2, 9), &m, &w).unwrap_err();
        assert!(err.to_string().contains("kernel too large for configuration"));
    }

    #[test]
    fn identity_pointwise_conv() {
        let m = ModelSpec {
            name: String::from("id"),
            input: [4, 4, 3],
            layers: vec![LayerSpec::conv(3, 1, 1, 0, Activation::Linear)],
        };
        let f = FixedPointFormat::Q2_14;
        let one = f.word(1 << 14).unwrap();
        let mut kernels = vec![f.zero(); 9];
        for k in 0..3 {
            kernels[k * 3 + k] = one;
        }
        let w = vec![LayerWeights {
            index: 0,
            kind: LayerKind::Conv,
            format: f,
            scale: 1.0,
            scale_word: one,
            filters: 3,
            window: 1,
            depth: 3,
            bias: vec![f.zero(); 3],
            kernels,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_input(48, &mut rng);
        for cap in [1, 2, 3] {
            let plan = plan_model_with(&cfg(2, 64), &m, &w, cap).unwrap();
            let got = run_inference(&plan, &w, &x, &ExecOptions::default()).unwrap();
            assert_eq!(got.output(), &x[..]);
        }
    }

    #[test]
    fn split_passes_match_unsplit() {
        let m = ModelSpec {
            name: String::from("s"),
            input: [6, 6, 3],
            layers: vec![
                LayerSpec::conv(10, 3, 1, 1, Activation::Relu),
                LayerSpec::pool(crate::model::PoolKind::Max, 2, 2),
                LayerSpec::dense(7, Activation::Linear),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_weights(&m, &mut rng);
        let x = random_input(108, &mut rng);
        let c = cfg(3, 4096);
        let base = run_inference(&plan_model(&c, &m, &w).unwrap(), &w, &x, &ExecOptions::default()).unwrap();
        for k in [2usize, 3, 5] {
            let per = 10usize.div_ceil(k);
            let plan = plan_model_with(&c, &m, &w, per).unwrap();
            assert_eq!(plan.layers[0].passes.len(), k);
            let got = run_inference(&plan, &w, &x, &ExecOptions::default()).unwrap();
            assert_eq!(got.layers, base.layers);
        }
    }

    #[test]
    fn input_length_checked() {
        let m = ModelSpec {
            name: String::from("c"),
            input: [3, 3, 1],
            layers: vec![LayerSpec::pool(crate::model::PoolKind::Avg, 3, 1)],
        };
        let plan = plan_model(&cfg(1, 8), &m, &[]).unwrap();
        assert!(matches!(
            run_inference(&plan, &[], &[], &ExecOptions::default()),
            Err(ScheduleError::InputLength { expected: 9, got: 0 })
        ));
    }
}
