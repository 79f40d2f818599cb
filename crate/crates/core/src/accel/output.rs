//! Output handler: merges PE results (or pooled pixels) into the Y stream,
//! prefixing each pixel with the words carried over from XBUF.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use super::network::{Actor, ChannelId, Channels, Step};
use super::{CnnaConfig, Fault, LayerCtrl, StreamPacket};
use crate::fxp::FixedWord;

enum Inputs {
    /// One channel per PE; kernel `k` comes from PE `k % pe_count`.
    Pes {
        chans: Vec<ChannelId>,
        kernels: usize,
    },
    Pool(ChannelId),
}

pub struct OutputHandler {
    inputs: Inputs,
    xbuf: Option<ChannelId>,
    out: ChannelId,
    offset: usize,
    beat: usize,
    pixels: usize,
    done: usize,
    carry: VecDeque<FixedWord>,
    pixel: Vec<FixedWord>,
    next: usize,
    pending: VecDeque<StreamPacket>,
}

impl OutputHandler {
    pub fn for_pes(
        cfg: &CnnaConfig,
        ctrl: &LayerCtrl,
        chans: Vec<ChannelId>,
        xbuf: Option<ChannelId>,
        out: ChannelId,
    ) -> Self {
        let kernels = ctrl.kernels_in_pass;
        Self::build(
            Inputs::Pes { chans, kernels },
            xbuf,
            out,
            ctrl.split.stitch_offset_words,
            cfg.pe_bw,
            ctrl.windows(),
        )
    }

    pub fn for_pool(ctrl: &LayerCtrl, input: ChannelId, out: ChannelId) -> Self {
        Self::build(Inputs::Pool(input), None, out, 0, ctrl.depth, ctrl.windows())
    }

    fn build(
        inputs: Inputs,
        xbuf: Option<ChannelId>,
        out: ChannelId,
        offset: usize,
        beat: usize,
        pixels: usize,
    ) -> Self {
        Self {
            inputs,
            xbuf,
            out,
            offset,
            beat: beat.max(1),
            pixels,
            done: 0,
            carry: VecDeque::new(),
            pixel: Vec::new(),
            next: 0,
            pending: VecDeque::new(),
        }
    }

    fn flush(&mut self, ch: &mut Channels) -> bool {
        let mut moved = false;
        while !self.pending.is_empty() && ch.can_push(self.out) {
            ch.push(self.out, self.pending.pop_front().expect("non-empty"));
            moved = true;
        }
        moved
    }

    fn emit_pixel(&mut self) {
        let words = core::mem::take(&mut self.pixel);
        let n = words.len().div_ceil(self.beat);
        for (i, c) in words.chunks(self.beat).enumerate() {
            self.pending.push_back(StreamPacket::new(c.to_vec(), i + 1 == n));
        }
        self.next = 0;
        self.done += 1;
    }

    /// Try to make progress on the current pixel. Returns whether anything
    /// moved.
    fn gather(&mut self, ch: &mut Channels) -> Result<bool, Fault> {
        let mut moved = false;
        if self.pixel.len() < self.offset {
            let xbuf = self.xbuf.ok_or(Fault::InvalidCtrl("stitching pass without XBUF"))?;
            while self.carry.len() < self.offset - self.pixel.len() {
                let Some(p) = ch.pop(xbuf) else { break };
                self.carry.extend(p.words);
                moved = true;
            }
            let take = (self.offset - self.pixel.len()).min(self.carry.len());
            self.pixel.extend(self.carry.drain(..take));
            if self.pixel.len() < self.offset {
                return Ok(moved);
            }
        }
        match &self.inputs {
            Inputs::Pool(input) => {
                if let Some(p) = ch.pop(*input) {
                    self.pixel.extend(p.words);
                    self.emit_pixel();
                    moved = true;
                }
            }
            Inputs::Pes { chans, kernels } => {
                let kernels = *kernels;
                while self.next < kernels {
                    let c = chans[self.next % chans.len()];
                    let Some(p) = ch.pop(c) else { break };
                    self.pixel.extend(p.words);
                    self.next += 1;
                    moved = true;
                }
                if self.next == kernels {
                    self.emit_pixel();
                }
            }
        }
        Ok(moved)
    }
}

impl Actor for OutputHandler {
    fn name(&self) -> String {
        "output_handler".into()
    }

    fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
        let mut moved = self.flush(ch);
        while self.pending.is_empty() && self.done < self.pixels {
            if !self.gather(ch)? {
                break;
            }
            moved = true;
            moved |= self.flush(ch);
        }
        if self.done == self.pixels && self.pending.is_empty() {
            if let Some(x) = self.xbuf {
                if !self.carry.is_empty() || !ch.is_empty(x) {
                    return Err(Fault::StitchLengthMismatch {
                        expected: self.pixels * self.offset,
                        got: self.pixels * self.offset + self.carry.len(),
                    });
                }
            }
            return Ok(Step::Done);
        }
        Ok(if moved { Step::Busy } else { Step::Idle })
    }
}
