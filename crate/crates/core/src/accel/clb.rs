//! Data buffer: turns the raster pixel stream into sliding windows.
//!
//! The last `window` padded lines are kept in a ring. A window is emitted as
//! soon as its bottom-right pixel is complete, cut into packets of one
//! package width and sent once per replay group.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::network::{Actor, ChannelId, Channels, Step};
use super::{CnnaConfig, Fault, LayerCtrl, StreamPacket};
use crate::fxp::FixedWord;

pub struct Clb {
    input: ChannelId,
    /// Destinations per replay group.
    routes: Vec<Vec<ChannelId>>,
    package: usize,
    pad_packets: bool,
    row_size: usize,
    padded: usize,
    depth: usize,
    window: usize,
    stride: usize,
    pad: usize,
    zero: FixedWord,
    lines: Vec<Vec<FixedWord>>,
    /// Padded coordinates of the pixel being assembled.
    line: usize,
    col: usize,
    filled: usize,
    pending: VecDeque<(ChannelId, StreamPacket)>,
    received: usize,
    expected: usize,
}

impl Clb {
    pub fn new(cfg: &CnnaConfig, ctrl: &LayerCtrl, input: ChannelId, routes: Vec<Vec<ChannelId>>) -> Self {
        let padded = ctrl.row_size + 2 * ctrl.zero_pad;
        // Package-wide beats; only PEs need the last one zero-padded.
        let pad_packets = ctrl.uses_pe();
        let package = cfg.package_words();
        Self {
            input,
            routes,
            package,
            pad_packets,
            row_size: ctrl.row_size,
            padded,
            depth: ctrl.depth,
            window: ctrl.window,
            stride: ctrl.stride,
            pad: ctrl.zero_pad,
            zero: cfg.format.zero(),
            lines: vec![vec![cfg.format.zero(); padded * ctrl.depth]; ctrl.window],
            line: 0,
            col: 0,
            filled: 0,
            pending: VecDeque::new(),
            received: 0,
            expected: ctrl.input_words(),
        }
    }

    fn finished(&self) -> bool {
        self.line == self.padded
    }

    fn is_pad(&self) -> bool {
        let data = self.pad..self.pad + self.row_size;
        !data.contains(&self.line) || !data.contains(&self.col)
    }

    fn slot(&mut self) -> &mut [FixedWord] {
        let start = self.col * self.depth;
        let slot = self.line % self.window;
        &mut self.lines[slot][start..start + self.depth]
    }

    fn window_ready(&self) -> bool {
        let w = self.window;
        let (i, j) = (self.line, self.col);
        i + 1 >= w && (i + 1 - w).is_multiple_of(self.stride) && j + 1 >= w && (j + 1 - w).is_multiple_of(self.stride)
    }

    fn emit_window(&mut self) {
        let w = self.window;
        let (top, left) = (self.line + 1 - w, self.col + 1 - w);
        let mut words = Vec::with_capacity(w * w * self.depth);
        for wx in 0..w {
            let line = &self.lines[(top + wx) % w];
            words.extend_from_slice(&line[left * self.depth..(left + w) * self.depth]);
        }
        if self.pad_packets {
            let padded = words.len().div_ceil(self.package) * self.package;
            words.resize(padded, self.zero);
        }
        let n = words.len().div_ceil(self.package);
        for dests in &self.routes {
            for (i, chunk) in words.chunks(self.package).enumerate() {
                for &d in dests {
                    self.pending
                        .push_back((d, StreamPacket::new(chunk.to_vec(), i + 1 == n)));
                }
            }
        }
    }

    /// Finish the current pixel and move to the next padded position.
    fn complete_pixel(&mut self) {
        if self.window_ready() {
            self.emit_window();
        }
        self.filled = 0;
        self.col += 1;
        if self.col == self.padded {
            self.col = 0;
            self.line += 1;
        }
    }

    fn flush(&mut self, ch: &mut Channels) -> bool {
        let mut moved = false;
        while let Some((d, _)) = self.pending.front() {
            if !ch.can_push(*d) {
                break;
            }
            let (d, p) = self.pending.pop_front().expect("front exists");
            ch.push(d, p);
            moved = true;
        }
        moved
    }
}

impl Actor for Clb {
    fn name(&self) -> String {
        "clb".into()
    }

    fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
        let mut moved = self.flush(ch);
        while self.pending.is_empty() && !self.finished() {
            if self.is_pad() {
                let zero = self.zero;
                self.slot().fill(zero);
                self.complete_pixel();
                moved = true;
                continue;
            }
            let Some(p) = ch.pop(self.input) else {
                break;
            };
            moved = true;
            self.received += p.words.len();
            if self.received > self.expected || self.filled + p.words.len() > self.depth {
                return Err(Fault::InputLengthMismatch {
                    expected: self.expected,
                    got: self.received,
                });
            }
            let at = self.filled;
            self.slot()[at..at + p.words.len()].copy_from_slice(&p.words);
            self.filled += p.words.len();
            if self.filled == self.depth {
                self.complete_pixel();
            }
            if p.last && self.received != self.expected {
                return Err(Fault::InputLengthMismatch {
                    expected: self.expected,
                    got: self.received,
                });
            }
            moved |= self.flush(ch);
        }
        Ok(if self.finished() && self.pending.is_empty() {
            Step::Done
        } else if moved {
            Step::Busy
        } else {
            Step::Idle
        })
    }
}
