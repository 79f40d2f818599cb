//! Stream-level model of the accelerator.
//!
//! One layer pass runs as a process network:
//!
//! ```text
//!   X ──▶ data buffer (CLB) ──┬──▶ PE 0..N ──┐
//!   W ──▶ weight buffer ──────┘              ├──▶ output handler ──▶ Y
//!                            └──▶ pooling ───┘          ▲
//!                                               XBUF ───┘
//! ```
//!
//! Every block is an [`network::Actor`] connected by bounded FIFOs. The CTRL
//! record ([`LayerCtrl`]) configures all blocks before the data streams
//! start. Results are bit-exact with [`crate::oracle`].

mod clb;
pub mod cycles;
pub mod network;
mod output;
mod pe;
mod pool;
mod weight_buffer;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fxp::{FixedPointFormat, FixedWord};
use crate::model::{window_positions, Activation, PoolKind};

pub use clb::Clb;
pub use network::{Channels, RunStats, Schedule, TraceEvent, TraceKind};
pub use output::OutputHandler;
pub use pe::Pe;
pub use pool::Pool;
pub use weight_buffer::WeightBuffer;

use network::{Network, Source};

/// Default FIFO depth in packets.
pub const DEFAULT_CHANNEL_CAPACITY: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Fault {
    #[error("invalid control record: {0}")]
    InvalidCtrl(&'static str),
    #[error("input stream length mismatch: expected {expected} words, got {got}")]
    InputLengthMismatch { expected: usize, got: usize },
    #[error("stitch stream length mismatch: expected {expected} words, got {got}")]
    StitchLengthMismatch { expected: usize, got: usize },
    #[error("weight stream length mismatch: expected {expected} words, got {got}")]
    WeightLengthMismatch { expected: usize, got: usize },
    #[error("weight buffer overflow: capacity {capacity} packages")]
    WeightBufferOverflow { capacity: usize },
    #[error("PE {pe}: unpaired frames (x {x_words} words, last={x_last}; w {w_words} words, last={w_last})")]
    UnpairedFrames {
        pe: usize,
        x_words: usize,
        w_words: usize,
        x_last: bool,
        w_last: bool,
    },
    #[error("pooling window of {got} words, expected at least {expected}")]
    PoolWindow { expected: usize, got: usize },
    #[error("deadlock: blocked actors {blocked:?}")]
    Deadlock { blocked: Vec<String> },
}

/// One beat on a streaming channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamPacket {
    pub words: Vec<FixedWord>,
    /// Final beat of a logical transfer (a window, a kernel, a pixel).
    pub last: bool,
}

impl StreamPacket {
    pub fn new(words: Vec<FixedWord>, last: bool) -> Self {
        Self { words, last }
    }
}

/// Cut a word stream into beats of at most `width` words; the final beat
/// carries the last flag.
pub fn packetize(words: &[FixedWord], width: usize) -> Vec<StreamPacket> {
    assert!(width > 0);
    let n = words.len().div_ceil(width);
    words
        .chunks(width)
        .enumerate()
        .map(|(i, c)| StreamPacket::new(c.to_vec(), i + 1 == n))
        .collect()
}

pub fn flatten(packets: &[StreamPacket]) -> Vec<FixedWord> {
    packets.iter().flat_map(|p| p.words.iter().copied()).collect()
}

/// Structural parameters of one accelerator instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnaConfig {
    pub format: FixedPointFormat,
    /// Number of processing elements.
    pub pe_count: usize,
    /// Words per beat on the external streams.
    pub pe_bw: usize,
    /// Output bandwidth multiplier of the data buffer.
    pub db_out: usize,
    /// Weight-buffer capacity in packages of `db_out * pe_bw` words.
    pub wb_packages: usize,
}

impl CnnaConfig {
    /// Internal bandwidth of the PEs and the weight buffer.
    pub fn package_words(&self) -> usize {
        self.db_out * self.pe_bw
    }

    pub fn validate(&self) -> Result<(), Fault> {
        if self.pe_count == 0 || self.pe_bw == 0 || self.db_out == 0 || self.wb_packages == 0 {
            return Err(Fault::InvalidCtrl("configuration values must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Conv,
    Pool(PoolKind),
    Dense,
}

/// Position of a pass within a split layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitInfo {
    pub index: usize,
    pub count: usize,
    /// Words per pixel taken from XBUF before this pass's new outputs.
    pub stitch_offset_words: usize,
}

impl SplitInfo {
    pub const NONE: SplitInfo = SplitInfo {
        index: 0,
        count: 1,
        stitch_offset_words: 0,
    };
}

/// Per-pass control record sent over CTRL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCtrl {
    pub op: OpKind,
    pub row_size: usize,
    pub depth: usize,
    pub stride: usize,
    pub window: usize,
    pub zero_pad: usize,
    /// How many times the data buffer re-sends each window.
    pub replay: usize,
    pub activation: Activation,
    /// Quantized output scale factor.
    pub scale: FixedWord,
    pub kernels_in_pass: usize,
    pub split: SplitInfo,
    /// Words per beat on X; must divide `depth`.
    pub x_beat_words: usize,
}

impl LayerCtrl {
    /// Replay count that gives every kernel of the pass one PE slot.
    pub fn replay_for(kernels: usize, pe_count: usize) -> usize {
        kernels.div_ceil(pe_count).max(1)
    }

    /// Largest beat width up to `max` that divides `depth`.
    pub fn beat_width(depth: usize, max: usize) -> usize {
        (1..=max.min(depth))
            .rev()
            .find(|w| depth.is_multiple_of(*w))
            .unwrap_or(1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        cfg: &CnnaConfig,
        row_size: usize,
        depth: usize,
        window: usize,
        stride: usize,
        zero_pad: usize,
        kernels_in_pass: usize,
        activation: Activation,
        scale: FixedWord,
    ) -> Self {
        Self {
            op: OpKind::Conv,
            row_size,
            depth,
            stride,
            window,
            zero_pad,
            replay: Self::replay_for(kernels_in_pass, cfg.pe_count),
            activation,
            scale,
            kernels_in_pass,
            split: SplitInfo::NONE,
            x_beat_words: Self::beat_width(depth, cfg.pe_bw),
        }
    }

    pub fn dense(
        cfg: &CnnaConfig,
        inputs: usize,
        units_in_pass: usize,
        activation: Activation,
        scale: FixedWord,
    ) -> Self {
        Self {
            op: OpKind::Dense,
            ..Self::conv(cfg, 1, inputs, 1, 1, 0, units_in_pass, activation, scale)
        }
    }

    pub fn pool(cfg: &CnnaConfig, kind: PoolKind, row_size: usize, depth: usize, window: usize, stride: usize) -> Self {
        Self {
            op: OpKind::Pool(kind),
            row_size,
            depth,
            stride,
            window,
            zero_pad: 0,
            replay: 1,
            activation: Activation::Linear,
            scale: cfg.format.zero(),
            kernels_in_pass: 0,
            split: SplitInfo::NONE,
            x_beat_words: Self::beat_width(depth, cfg.pe_bw),
        }
    }

    pub fn with_split(mut self, split: SplitInfo) -> Self {
        self.split = split;
        self
    }

    pub fn output_edge(&self) -> usize {
        window_positions(self.row_size, self.window, self.stride, self.zero_pad)
    }

    /// Windows per replay.
    pub fn windows(&self) -> usize {
        let e = self.output_edge();
        e * e
    }

    pub fn window_words(&self) -> usize {
        self.window * self.window * self.depth
    }

    pub fn input_words(&self) -> usize {
        self.row_size * self.row_size * self.depth
    }

    /// Words per output pixel on Y.
    pub fn output_depth(&self) -> usize {
        match self.op {
            OpKind::Pool(_) => self.depth,
            _ => self.split.stitch_offset_words + self.kernels_in_pass,
        }
    }

    pub fn output_words(&self) -> usize {
        self.windows() * self.output_depth()
    }

    pub fn xbuf_words(&self) -> usize {
        self.windows() * self.split.stitch_offset_words
    }

    pub fn uses_pe(&self) -> bool {
        !matches!(self.op, OpKind::Pool(_))
    }

    pub fn validate(&self, cfg: &CnnaConfig) -> Result<(), Fault> {
        use Fault::InvalidCtrl as E;
        cfg.validate()?;
        if self.row_size == 0 || self.depth == 0 || self.window == 0 || self.stride == 0 {
            return Err(E("row size, depth, window and stride must be positive"));
        }
        if self.row_size + 2 * self.zero_pad < self.window {
            return Err(E("window larger than padded row"));
        }
        if self.replay == 0 {
            return Err(E("replay must be at least one"));
        }
        if self.x_beat_words == 0 || !self.depth.is_multiple_of(self.x_beat_words) {
            return Err(E("depth must be divisible by the X beat width"));
        }
        if self.split.count == 0 || self.split.index >= self.split.count {
            return Err(E("split index out of range"));
        }
        if self.split.index == 0 && self.split.stitch_offset_words != 0 {
            return Err(E("first split pass cannot stitch"));
        }
        match self.op {
            OpKind::Pool(_) => {
                if self.replay != 1 || self.kernels_in_pass != 0 || self.split.count != 1 {
                    return Err(E("pooling has no kernels, replay or splits"));
                }
            }
            OpKind::Conv | OpKind::Dense => {
                if self.kernels_in_pass == 0 {
                    return Err(E("pass has no kernels"));
                }
                if self.replay != Self::replay_for(self.kernels_in_pass, cfg.pe_count) {
                    return Err(E("replay does not match kernels per PE"));
                }
                if self.op == OpKind::Dense && (self.row_size != 1 || self.window != 1 || self.zero_pad != 0) {
                    return Err(E("dense passes use a 1x1 window over a single pixel"));
                }
            }
        }
        Ok(())
    }
}

/// Weight-stream length for one pass.
pub fn weight_stream_words(cfg: &CnnaConfig, ctrl: &LayerCtrl) -> usize {
    if !ctrl.uses_pe() {
        return 0;
    }
    let p = cfg.package_words();
    ctrl.kernels_in_pass * (crate::model::packages_per_filter(ctrl.window_words(), p) + 1) * p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub channel_capacity: usize,
    pub schedule: Schedule,
    pub trace: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            channel_capacity: DEFAULT_CHANNEL_CAPACITY,
            schedule: Schedule::Forward,
            trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecOutput {
    pub y: Vec<FixedWord>,
    pub stats: RunStats,
    /// Analytical cycle estimate, see [`cycles`].
    pub modeled_cycles: u64,
    pub trace: Option<Vec<TraceEvent>>,
}

fn check_len(expected: usize, got: usize, f: fn(usize, usize) -> Fault) -> Result<(), Fault> {
    if expected == got {
        Ok(())
    } else {
        Err(f(expected, got))
    }
}

/// Run one pass of the accelerator.
pub fn cnna_execute(
    cfg: &CnnaConfig,
    ctrl: &LayerCtrl,
    x: &[FixedWord],
    w: &[FixedWord],
    xbuf: &[FixedWord],
    opts: &ExecOptions,
) -> Result<ExecOutput, Fault> {
    ctrl.validate(cfg)?;
    check_len(ctrl.input_words(), x.len(), |expected, got| {
        Fault::InputLengthMismatch { expected, got }
    })?;
    check_len(weight_stream_words(cfg, ctrl), w.len(), |expected, got| {
        Fault::WeightLengthMismatch { expected, got }
    })?;
    check_len(ctrl.xbuf_words(), xbuf.len(), |expected, got| {
        Fault::StitchLengthMismatch { expected, got }
    })?;

    let cap = opts.channel_capacity;
    let mut net = Network::new(opts.trace);
    let x_in = net.channel("X", cap);
    let y_out = net.channel("Y", cap);
    net.actor(Source::new("dma_x", x_in, packetize(x, ctrl.x_beat_words)));
    let xbuf_in = if ctrl.split.stitch_offset_words > 0 {
        let c = net.channel("XBUF", cap);
        net.actor(Source::new("dma_xbuf", c, packetize(xbuf, cfg.pe_bw)));
        Some(c)
    } else {
        None
    };

    if ctrl.uses_pe() {
        let w_in = net.channel("W", cap);
        net.actor(Source::new("dma_w", w_in, packetize(w, cfg.pe_bw)));
        let mut w_pe = Vec::new();
        let mut x_pe = Vec::new();
        let mut y_pe = Vec::new();
        let active = cfg.pe_count.min(ctrl.kernels_in_pass);
        for p in 0..active {
            w_pe.push(net.channel(alloc::format!("W_PE{p}"), cap));
            x_pe.push(net.channel(alloc::format!("X_PE{p}"), cap));
            y_pe.push(net.channel(alloc::format!("Y_PE{p}"), cap));
        }
        net.actor(WeightBuffer::new(cfg, ctrl, w_in, w_pe.clone()));
        let routes = (0..ctrl.replay)
            .map(|r| {
                (0..active)
                    .filter(|p| r * cfg.pe_count + p < ctrl.kernels_in_pass)
                    .map(|p| x_pe[p])
                    .collect()
            })
            .collect();
        net.actor(Clb::new(cfg, ctrl, x_in, routes));
        for p in 0..active {
            net.actor(Pe::new(p, cfg, ctrl, w_pe[p], x_pe[p], y_pe[p]));
        }
        net.actor(OutputHandler::for_pes(cfg, ctrl, y_pe, xbuf_in, y_out));
    } else {
        let pool_in = net.channel("POOL_IN", cap);
        let pool_out = net.channel("POOL_OUT", cap);
        net.actor(Clb::new(cfg, ctrl, x_in, alloc::vec![alloc::vec![pool_in]]));
        net.actor(Pool::new(ctrl, pool_in, pool_out));
        net.actor(OutputHandler::for_pool(ctrl, pool_out, y_out));
    }
    net.sink(y_out);
    let stats = net.run(opts.schedule)?;
    let y = flatten(&net.take_sink(y_out));
    Ok(ExecOutput {
        y,
        stats,
        modeled_cycles: cycles::CycleModel::default().pass_cycles(cfg, ctrl),
        trace: net.take_trace(),
    })
}

/// Run the weight buffer alone; returns the packet stream each PE receives.
pub fn weight_buffer_run(
    cfg: &CnnaConfig,
    ctrl: &LayerCtrl,
    w: &[StreamPacket],
) -> Result<Vec<Vec<StreamPacket>>, Fault> {
    ctrl.validate(cfg)?;
    let mut net = Network::new(false);
    let w_in = net.channel("W", DEFAULT_CHANNEL_CAPACITY);
    net.actor(Source::new("dma_w", w_in, w.iter().cloned()));
    let active = cfg.pe_count.min(ctrl.kernels_in_pass);
    let outs: Vec<_> = (0..active)
        .map(|p| net.channel(alloc::format!("W_PE{p}"), DEFAULT_CHANNEL_CAPACITY))
        .collect();
    for &o in &outs {
        net.sink(o);
    }
    net.actor(WeightBuffer::new(cfg, ctrl, w_in, outs.clone()));
    net.run(Schedule::Forward)?;
    Ok(outs.into_iter().map(|o| net.take_sink(o)).collect())
}

/// Run the data buffer alone; returns every emitted window (with replays)
/// as one packet stream.
pub fn clb_run(cfg: &CnnaConfig, ctrl: &LayerCtrl, x: &[StreamPacket]) -> Result<Vec<StreamPacket>, Fault> {
    ctrl.validate(cfg)?;
    let got: usize = x.iter().map(|p| p.words.len()).sum();
    check_len(ctrl.input_words(), got, |expected, got| Fault::InputLengthMismatch {
        expected,
        got,
    })?;
    let mut net = Network::new(false);
    let x_in = net.channel("X", DEFAULT_CHANNEL_CAPACITY);
    let out = net.channel("WINDOWS", DEFAULT_CHANNEL_CAPACITY);
    net.actor(Source::new("dma_x", x_in, x.iter().cloned()));
    net.actor(Clb::new(cfg, ctrl, x_in, alloc::vec![alloc::vec![out]; ctrl.replay]));
    net.sink(out);
    net.run(Schedule::Forward)?;
    Ok(net.take_sink(out))
}

/// Run one PE on paired kernel and window streams.
pub fn pe_run(
    cfg: &CnnaConfig,
    ctrl: &LayerCtrl,
    w: &[StreamPacket],
    x: &[StreamPacket],
) -> Result<Vec<FixedWord>, Fault> {
    let outputs = w.iter().filter(|p| p.last).count();
    let mut net = Network::new(false);
    let w_in = net.channel("W_PE0", DEFAULT_CHANNEL_CAPACITY);
    let x_in = net.channel("X_PE0", DEFAULT_CHANNEL_CAPACITY);
    let y = net.channel("Y_PE0", DEFAULT_CHANNEL_CAPACITY);
    net.actor(Source::new("w", w_in, w.iter().cloned()));
    net.actor(Source::new("x", x_in, x.iter().cloned()));
    net.actor(Pe::with_outputs(0, cfg.format, ctrl, w_in, x_in, y, outputs));
    net.sink(y);
    net.run(Schedule::Forward)?;
    Ok(flatten(&net.take_sink(y)))
}

/// Run the pooling block alone over a window stream.
pub fn pool_run(ctrl: &LayerCtrl, windows: &[StreamPacket]) -> Result<Vec<FixedWord>, Fault> {
    if ctrl.uses_pe() {
        return Err(Fault::InvalidCtrl("pooling block needs a pool control record"));
    }
    let count = windows.iter().filter(|p| p.last).count();
    let mut net = Network::new(false);
    let input = net.channel("POOL_IN", DEFAULT_CHANNEL_CAPACITY);
    let out = net.channel("POOL_OUT", DEFAULT_CHANNEL_CAPACITY);
    net.actor(Source::new("clb", input, windows.iter().cloned()));
    net.actor(Pool::with_windows(ctrl, input, out, count));
    net.sink(out);
    net.run(Schedule::Forward)?;
    Ok(flatten(&net.take_sink(out)))
}

/// Run the output handler alone. `pe_values[p]` holds PE `p`'s outputs in
/// emission order; `pool` is used for pooling passes.
pub fn output_handler_run(
    cfg: &CnnaConfig,
    ctrl: &LayerCtrl,
    pe_values: &[Vec<FixedWord>],
    pool: &[StreamPacket],
    xbuf: &[FixedWord],
) -> Result<Vec<FixedWord>, Fault> {
    ctrl.validate(cfg)?;
    check_len(ctrl.xbuf_words(), xbuf.len(), |expected, got| {
        Fault::StitchLengthMismatch { expected, got }
    })?;
    let mut net = Network::new(false);
    let y = net.channel("Y", DEFAULT_CHANNEL_CAPACITY);
    let xbuf_in = (ctrl.split.stitch_offset_words > 0).then(|| {
        let c = net.channel("XBUF", DEFAULT_CHANNEL_CAPACITY);
        net.actor(Source::new("xbuf", c, packetize(xbuf, cfg.pe_bw)));
        c
    });
    if ctrl.uses_pe() {
        let mut chans = Vec::new();
        for (p, vals) in pe_values.iter().enumerate() {
            let c = net.channel(alloc::format!("Y_PE{p}"), DEFAULT_CHANNEL_CAPACITY);
            net.actor(Source::new(
                alloc::format!("pe{p}"),
                c,
                vals.iter().map(|&v| StreamPacket::new(alloc::vec![v], true)),
            ));
            chans.push(c);
        }
        net.actor(OutputHandler::for_pes(cfg, ctrl, chans, xbuf_in, y));
    } else {
        let c = net.channel("POOL_OUT", DEFAULT_CHANNEL_CAPACITY);
        net.actor(Source::new("pool", c, pool.iter().cloned()));
        net.actor(OutputHandler::for_pool(ctrl, c, y));
    }
    net.sink(y);
    net.run(Schedule::Forward)?;
    Ok(flatten(&net.take_sink(y)))
}
