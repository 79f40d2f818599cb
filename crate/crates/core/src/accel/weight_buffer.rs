//! Weight buffer: collects a pass's packages from W, then streams the
//! kernel each PE needs for every window it computes.

use alloc::string::String;
use alloc::vec::Vec;

use super::network::{Actor, ChannelId, Channels, Step};
use super::{CnnaConfig, Fault, LayerCtrl, StreamPacket};
use crate::fxp::FixedWord;
use crate::model::packages_per_filter;

pub struct WeightBuffer {
    input: ChannelId,
    outs: Vec<ChannelId>,
    pe_count: usize,
    package: usize,
    ppf: usize,
    kernels: usize,
    capacity: usize,
    windows: usize,
    replay: usize,
    /// Words received but not yet formed into a package.
    partial: Vec<FixedWord>,
    packages: Vec<Vec<FixedWord>>,
    loaded: bool,
    // Streaming cursor: window, replay group, package, PE slot.
    window: usize,
    group: usize,
    slot: usize,
    pkg: usize,
}

impl WeightBuffer {
    pub fn new(cfg: &CnnaConfig, ctrl: &LayerCtrl, input: ChannelId, outs: Vec<ChannelId>) -> Self {
        Self {
            input,
            outs,
            pe_count: cfg.pe_count,
            package: cfg.package_words(),
            ppf: packages_per_filter(ctrl.window_words(), cfg.package_words()),
            kernels: ctrl.kernels_in_pass,
            capacity: cfg.wb_packages,
            windows: ctrl.windows(),
            replay: ctrl.replay,
            partial: Vec::new(),
            packages: Vec::new(),
            loaded: false,
            window: 0,
            group: 0,
            slot: 0,
            pkg: 0,
        }
    }

    fn expected_packages(&self) -> usize {
        self.kernels * (self.ppf + 1)
    }

    fn load(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
        let Some(p) = ch.pop(self.input) else {
            return Ok(Step::Idle);
        };
        self.partial.extend_from_slice(&p.words);
        while self.partial.len() >= self.package {
            let rest = self.partial.split_off(self.package);
            self.packages.push(core::mem::replace(&mut self.partial, rest));
            if self.packages.len() > self.capacity {
                return Err(Fault::WeightBufferOverflow {
                    capacity: self.capacity,
                });
            }
        }
        if self.packages.len() > self.expected_packages() {
            return Err(Fault::WeightLengthMismatch {
                expected: self.expected_packages() * self.package,
                got: self.packages.len() * self.package + self.partial.len(),
            });
        }
        if p.last {
            if self.packages.len() != self.expected_packages() || !self.partial.is_empty() {
                return Err(Fault::WeightLengthMismatch {
                    expected: self.expected_packages() * self.package,
                    got: self.packages.len() * self.package + self.partial.len(),
                });
            }
            self.loaded = true;
        }
        Ok(Step::Busy)
    }

    /// Package `pkg` of kernel `k`'s frame: its bias package, then its
    /// weight packages.
    fn frame_package(&self, k: usize, pkg: usize) -> &[FixedWord] {
        if pkg == 0 {
            &self.packages[k]
        } else {
            &self.packages[self.kernels + k * self.ppf + pkg - 1]
        }
    }

    /// PE slots that hold a kernel in the current replay group.
    fn slots(&self) -> usize {
        (self.kernels - self.group * self.pe_count).min(self.pe_count)
    }

    /// Advance the cursor; package index runs outside the PE slot so every
    /// PE sees package `i` before any PE sees package `i + 1`, the same
    /// order the data buffer broadcasts windows in.
    fn advance(&mut self) {
        self.slot += 1;
        if self.slot < self.slots() {
            return;
        }
        self.slot = 0;
        self.pkg += 1;
        if self.pkg <= self.ppf {
            return;
        }
        self.pkg = 0;
        self.group += 1;
        if self.group == self.replay {
            self.group = 0;
            self.window += 1;
        }
    }
}

impl Actor for WeightBuffer {
    fn name(&self) -> String {
        "weight_buffer".into()
    }

    fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
        if !self.loaded {
            return self.load(ch);
        }
        let mut moved = false;
        while self.window < self.windows {
            let out = self.outs[self.slot];
            if !ch.can_push(out) {
                break;
            }
            let k = self.group * self.pe_count + self.slot;
            let last = self.pkg == self.ppf;
            ch.push(out, StreamPacket::new(self.frame_package(k, self.pkg).to_vec(), last));
            moved = true;
            self.advance();
        }
        Ok(if self.window == self.windows {
            Step::Done
        } else if moved {
            Step::Busy
        } else {
            Step::Idle
        })
    }
}
