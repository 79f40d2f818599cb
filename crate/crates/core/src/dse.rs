//! Design-space exploration over the five accelerator parameters
//! `[data_size, pe_bw, pe_count, db_out, kernels_capacity]`.
//!
//! Latency runs each op through the simulator's per-pass cycle model as a
//! single unsplit pass; resources come from a DSP and BRAM model whose
//! constants live in [`CostModel`]. Neither claims cycle- or slice-accurate numbers.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::accel::cycles::CycleModel;
use crate::accel::{CnnaConfig, LayerCtrl};
use crate::fxp::FixedPointFormat;
use crate::model::{Activation, LayerKind, LayerShape, LayerSpec, ModelSpec, PoolKind};
use crate::scheduler::{plan_layer_passes, plan_pool_pass, PassPlan, ScheduleError};

/// Words in the largest kernel the weight buffer is sized for (3x3x512).
pub const REFERENCE_KERNEL_WORDS: usize = 3 * 3 * 512;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DseError {
    #[error("invalid beta {beta:?}: {reason}")]
    InvalidBeta { beta: BetaConfig, reason: &'static str },
    #[error("empty candidate grid")]
    EmptyGrid,
    #[error("invalid device profile: {0}")]
    InvalidDevice(&'static str),
    #[error("workload: {0}")]
    Workload(String),
}

/// One accelerator candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BetaConfig {
    pub data_size: u32,
    pub pe_bw: usize,
    pub pe_count: usize,
    pub db_out: usize,
    pub kernels_capacity: usize,
}

impl BetaConfig {
    pub const fn new(data_size: u32, pe_bw: usize, pe_count: usize, db_out: usize, kernels_capacity: usize) -> Self {
        Self {
            data_size,
            pe_bw,
            pe_count,
            db_out,
            kernels_capacity,
        }
    }

    pub fn validate(&self) -> Result<(), DseError> {
        let bad = |reason| DseError::InvalidBeta { beta: *self, reason };
        if ![8, 16, 32].contains(&self.data_size) {
            return Err(bad("data size must be 8, 16 or 32 bits"));
        }
        if self.pe_bw == 0 || self.pe_count == 0 || self.db_out == 0 || self.kernels_capacity == 0 {
            return Err(bad("all parameters must be positive"));
        }
        Ok(())
    }

    pub fn package_words(&self) -> usize {
        self.pe_bw * self.db_out
    }

    /// Packages one reference kernel plus its bias package takes.
    pub fn packages_per_kernel(&self) -> usize {
        REFERENCE_KERNEL_WORDS.div_ceil(self.package_words()) + 1
    }

    /// Weight-buffer capacity in packages.
    pub fn wb_packages(&self) -> usize {
        self.packages_per_kernel() * self.kernels_capacity
    }

    pub fn wb_words(&self) -> usize {
        self.wb_packages() * self.package_words()
    }

    /// Q2.(data_size - 2).
    pub fn format(&self) -> FixedPointFormat {
        FixedPointFormat::new(2, self.data_size - 2).expect("validated data size")
    }

    pub fn accel_config(&self) -> CnnaConfig {
        CnnaConfig {
            format: self.format(),
            pe_count: self.pe_count,
            pe_bw: self.pe_bw,
            db_out: self.db_out,
            wb_packages: self.wb_packages(),
        }
    }
}

impl From<[usize; 5]> for BetaConfig {
    fn from(b: [usize; 5]) -> Self {
        Self::new(b[0] as u32, b[1], b[2], b[3], b[4])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub dsp: u32,
    /// 18 Kb block RAMs.
    pub bram18: u32,
    pub klut: f64,
    pub clock_mhz: f64,
}

impl DeviceProfile {
    pub fn ultra96() -> Self {
        Self {
            name: String::from("ultra96"),
            dsp: 360,
            bram18: 432,
            klut: 70.56,
            clock_mhz: 100.0,
        }
    }

    pub fn validate(&self) -> Result<(), DseError> {
        if self.dsp == 0 || self.bram18 == 0 || !(self.klut > 0.0 && self.clock_mhz > 0.0) {
            return Err(DseError::InvalidDevice("capacities and clock must be positive"));
        }
        Ok(())
    }
}

/// Tunable constants of the resource and latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub cycles: CycleModel,
    /// MACs one DSP slice serves per cycle at 8, 16 and 32 bits.
    pub macs_per_dsp: [u32; 3],
    pub bram_bits: u32,
    /// Data-buffer line buffers.
    pub line_buffer_words: usize,
    /// Window shift registers of the data buffer.
    pub shift_buffer_words: usize,
    /// Output handler pixel buffer.
    pub pixel_buffer_words: usize,
    /// Package-wide FIFO slots per PE.
    pub pe_fifo_packages: usize,
    /// Control, DMA and interconnect.
    pub bram_base: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            cycles: CycleModel::default(),
            macs_per_dsp: [8, 16, 8],
            bram_bits: 18 * 1024,
            line_buffer_words: 6 * 224 * 64,
            shift_buffer_words: 2 * REFERENCE_KERNEL_WORDS,
            pixel_buffer_words: 7 * 512,
            pe_fifo_packages: 4,
            bram_base: 4,
        }
    }
}

impl CostModel {
    pub fn macs_per_dsp(&self, data_size: u32) -> u32 {
        match data_size {
            8 => self.macs_per_dsp[0],
            16 => self.macs_per_dsp[1],
            _ => self.macs_per_dsp[2],
        }
    }

    pub fn dsp(&self, beta: &BetaConfig) -> u32 {
        let macs = beta.pe_count * beta.package_words();
        macs.div_ceil(self.macs_per_dsp(beta.data_size) as usize) as u32
    }

    fn brams(&self, words: usize, bits: u32) -> u32 {
        (words * bits as usize).div_ceil(self.bram_bits as usize) as u32
    }

    pub fn bram(&self, beta: &BetaConfig) -> u32 {
        let bits = beta.data_size;
        self.bram_base
            + self.brams(beta.wb_words(), bits)
            + self.brams(self.line_buffer_words, bits)
            + self.brams(self.shift_buffer_words, bits)
            + self.brams(self.pixel_buffer_words, bits)
            + self.brams(beta.pe_count * self.pe_fifo_packages * beta.package_words(), bits)
    }
}

/// One operation of the latency benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOp {
    pub name: String,
    /// `[rows, cols, depth]` of the op's input.
    pub input: [usize; 3],
    pub layer: LayerSpec,
}

/// Ops run one after another, each on its own input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub ops: Vec<BenchOp>,
}

impl Default for Workload {
    /// Two convolutions, two poolings and one dense layer.
    fn default() -> Self {
        let op = |name: &str, input, layer| BenchOp {
            name: String::from(name),
            input,
            layer,
        };
        Self {
            ops: alloc::vec![
                op("conv1", [32, 32, 16], LayerSpec::conv(32, 3, 1, 1, Activation::Relu)),
                op("pool1", [32, 32, 32], LayerSpec::pool(PoolKind::Max, 2, 2)),
                op("conv2", [16, 16, 32], LayerSpec::conv(64, 3, 1, 1, Activation::Relu)),
                op("pool2", [16, 16, 64], LayerSpec::pool(PoolKind::Max, 2, 2)),
                op("dense", [1, 1, 4096], LayerSpec::dense(16, Activation::Linear)),
            ],
        }
    }
}

impl Workload {
    fn shape(op: &BenchOp) -> Result<LayerShape, DseError> {
        let model = ModelSpec {
            name: op.name.clone(),
            input: op.input,
            layers: alloc::vec![op.layer.clone()],
        };
        model
            .shapes()
            .map(|s| s[0])
            .map_err(|e| DseError::Workload(alloc::format!("{}: {e}", op.name)))
    }

    /// Passes each op needs once the weight buffer forces splits.
    pub fn passes(&self, cfg: &CnnaConfig) -> Result<Vec<Vec<PassPlan>>, DseError> {
        self.ops
            .iter()
            .enumerate()
            .map(|(i, op)| {
                let shape = Self::shape(op)?;
                match op.layer.kind.pool() {
                    Some(kind) => Ok(alloc::vec![plan_pool_pass(cfg, &shape, kind)]),
                    None => plan_layer_passes(cfg, i, &shape, op.layer.activation, cfg.format.zero(), usize::MAX)
                        .map_err(|e: ScheduleError| DseError::Workload(alloc::format!("{}: {e}", op.name))),
                }
            })
            .collect()
    }

    /// Each op as one unsplit pass, as if the weight buffer held every kernel.
    pub fn whole_ops(&self, cfg: &CnnaConfig) -> Result<Vec<LayerCtrl>, DseError> {
        self.ops
            .iter()
            .map(|op| {
                let s = Self::shape(op)?;
                let zero = cfg.format.zero();
                Ok(match (op.layer.kind.pool(), s.kind) {
                    (Some(kind), _) => LayerCtrl::pool(cfg, kind, s.input.rows, s.input.depth, s.window, s.stride),
                    (None, LayerKind::Dense) => {
                        LayerCtrl::dense(cfg, s.window_depth, s.filters, op.layer.activation, zero)
                    }
                    _ => LayerCtrl::conv(
                        cfg,
                        s.input.rows,
                        s.input.depth,
                        s.window,
                        s.stride,
                        s.pad,
                        s.filters,
                        op.layer.activation,
                        zero,
                    ),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub beta: BetaConfig,
    /// Weight-buffer passes per op; latency does not charge for them.
    pub passes: Vec<usize>,
    pub op_cycles: Vec<u64>,
    pub op_latency_ms: Vec<f64>,
    pub latency_ms: f64,
    pub dsp: u32,
    pub bram: u32,
    pub resource_avg_pct: f64,
    pub feasible: bool,
}

impl CostEstimate {
    pub fn cycles(&self) -> u64 {
        self.op_cycles.iter().sum()
    }
}

pub fn estimate_cost(
    beta: &BetaConfig,
    device: &DeviceProfile,
    model: &CostModel,
    workload: &Workload,
) -> Result<CostEstimate, DseError> {
    beta.validate()?;
    device.validate()?;
    let cfg = beta.accel_config();
    let passes: Vec<usize> = workload.passes(&cfg)?.iter().map(Vec::len).collect();
    let op_cycles: Vec<u64> = workload
        .whole_ops(&cfg)?
        .iter()
        .map(|ctrl| model.cycles.pass_cycles(&cfg, ctrl))
        .collect();
    let per_ms = device.clock_mhz * 1e3;
    let op_latency_ms: Vec<f64> = op_cycles.iter().map(|&c| c as f64 / per_ms).collect();
    let dsp = model.dsp(beta);
    let bram = model.bram(beta);
    let resource_avg_pct = 50.0 * (dsp as f64 / device.dsp as f64 + bram as f64 / device.bram18 as f64);
    Ok(CostEstimate {
        beta: *beta,
        passes,
        latency_ms: op_latency_ms.iter().sum(),
        op_cycles,
        op_latency_ms,
        dsp,
        bram,
        resource_avg_pct,
        feasible: dsp <= device.dsp && bram <= device.bram18,
    })
}

/// `a` dominates `b` on (latency, resource average), both minimized.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// Flags of the non-dominated points.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&p| !points.iter().any(|&q| dominates(q, p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub estimate: CostEstimate,
    pub pareto: bool,
}

/// Mark the Pareto front. With `feasible_only`, candidates over device
/// capacity neither join the front nor dominate anything.
pub fn mark_pareto(estimates: Vec<CostEstimate>, feasible_only: bool) -> Vec<SweepRow> {
    let feasible: Vec<usize> = (0..estimates.len())
        .filter(|&i| estimates[i].feasible || !feasible_only)
        .collect();
    let pts: Vec<_> = feasible
        .iter()
        .map(|&i| (estimates[i].latency_ms, estimates[i].resource_avg_pct))
        .collect();
    let mut flags = alloc::vec![false; estimates.len()];
    for (&i, f) in feasible.iter().zip(pareto_flags(&pts)) {
        flags[i] = f;
    }
    estimates
        .into_iter()
        .zip(flags)
        .map(|(estimate, pareto)| SweepRow { estimate, pareto })
        .collect()
}

/// Estimate every candidate, in order, and mark the front over all of them.
pub fn sweep(
    grid: &[BetaConfig],
    device: &DeviceProfile,
    model: &CostModel,
    workload: &Workload,
) -> Result<Vec<SweepRow>, DseError> {
    if grid.is_empty() {
        return Err(DseError::EmptyGrid);
    }
    let est = grid
        .iter()
        .map(|b| estimate_cost(b, device, model, workload))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mark_pareto(est, false))
}

/// Full factorial grid, in nested order of the five parameters.
pub fn factorial(
    data_size: &[u32],
    pe_bw: &[usize],
    pe_count: &[usize],
    db_out: &[usize],
    kernels_capacity: &[usize],
) -> Vec<BetaConfig> {
    let mut out = Vec::new();
    for &d in data_size {
        for &b in pe_bw {
            for &n in pe_count {
                for &o in db_out {
                    for &k in kernels_capacity {
                        out.push(BetaConfig::new(d, b, n, o, k));
                    }
                }
            }
        }
    }
    out
}

/// The twelve candidates of the reference comparison table.
pub fn reference_grid() -> Vec<BetaConfig> {
    let mut out = Vec::new();
    for (d, k) in [(8, 42), (16, 32), (32, 20)] {
        for n in [8, 16] {
            for o in [3, 1] {
                out.push(BetaConfig::new(d, 128, n, o, k));
            }
        }
    }
    out
}
