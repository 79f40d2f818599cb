//! Processing element: multiply-accumulate over one kernel frame and one
//! window frame, then requantize, scale and activate.

use alloc::string::String;

use super::network::{Actor, ChannelId, Channels, Step};
use super::{CnnaConfig, Fault, LayerCtrl, StreamPacket};
use crate::fxp::{FixedPointFormat, FixedWord, WideAccum};
use crate::model::Activation;

pub struct Pe {
    id: usize,
    format: FixedPointFormat,
    scale: FixedWord,
    activation: Activation,
    w_in: ChannelId,
    x_in: ChannelId,
    out: ChannelId,
    outputs: usize,
    produced: usize,
    acc: Option<WideAccum>,
    result: Option<FixedWord>,
}

/// Number of results PE `id` produces in a pass.
pub fn pe_outputs(id: usize, pe_count: usize, ctrl: &LayerCtrl) -> usize {
    let kernels = (0..ctrl.replay)
        .filter(|r| r * pe_count + id < ctrl.kernels_in_pass)
        .count();
    kernels * ctrl.windows()
}

/// Requantize an accumulated dot product: round to the word format, apply
/// the scale factor, round again, then the activation.
pub fn finish(acc: WideAccum, format: FixedPointFormat, scale: FixedWord, activation: Activation) -> FixedWord {
    let q1 = acc.to_word(format);
    let q2 = q1.wide_mul(scale).to_word(format);
    activation.apply_word(q2)
}

impl Pe {
    pub fn new(
        id: usize,
        cfg: &CnnaConfig,
        ctrl: &LayerCtrl,
        w_in: ChannelId,
        x_in: ChannelId,
        out: ChannelId,
    ) -> Self {
        Self::with_outputs(
            id,
            cfg.format,
            ctrl,
            w_in,
            x_in,
            out,
            pe_outputs(id, cfg.pe_count, ctrl),
        )
    }

    pub fn with_outputs(
        id: usize,
        format: FixedPointFormat,
        ctrl: &LayerCtrl,
        w_in: ChannelId,
        x_in: ChannelId,
        out: ChannelId,
        outputs: usize,
    ) -> Self {
        Self {
            id,
            format,
            scale: ctrl.scale,
            activation: ctrl.activation,
            w_in,
            x_in,
            out,
            outputs,
            produced: 0,
            acc: None,
            result: None,
        }
    }

    fn unpaired(&self, w: &StreamPacket, x: &StreamPacket) -> Fault {
        Fault::UnpairedFrames {
            pe: self.id,
            x_words: x.words.len(),
            w_words: w.words.len(),
            x_last: x.last,
            w_last: w.last,
        }
    }
}

impl Actor for Pe {
    fn name(&self) -> String {
        alloc::format!("pe{}", self.id)
    }

    fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
        let mut moved = false;
        loop {
            if let Some(r) = self.result {
                if !ch.can_push(self.out) {
                    break;
                }
                ch.push(self.out, StreamPacket::new(alloc::vec![r], true));
                self.result = None;
                self.produced += 1;
                moved = true;
            }
            if self.produced == self.outputs {
                return Ok(Step::Done);
            }
            match self.acc {
                None => {
                    let Some(b) = ch.pop(self.w_in) else { break };
                    moved = true;
                    if b.last || b.words.is_empty() {
                        return Err(Fault::UnpairedFrames {
                            pe: self.id,
                            x_words: 0,
                            w_words: b.words.len(),
                            x_last: false,
                            w_last: b.last,
                        });
                    }
                    let mut acc = WideAccum::for_products(self.format);
                    acc.add_word(b.words[0]);
                    self.acc = Some(acc);
                }
                Some(ref mut acc) => {
                    if ch.peek(self.w_in).is_none() || ch.peek(self.x_in).is_none() {
                        break;
                    }
                    let w = ch.pop(self.w_in).expect("peeked");
                    let x = ch.pop(self.x_in).expect("peeked");
                    moved = true;
                    if w.last != x.last || w.words.len() != x.words.len() {
                        return Err(self.unpaired(&w, &x));
                    }
                    for (a, b) in x.words.iter().zip(&w.words) {
                        acc.mac(*a, *b);
                    }
                    if w.last {
                        let acc = self.acc.take().expect("in frame");
                        self.result = Some(finish(acc, self.format, self.scale, self.activation));
                    }
                }
            }
        }
        Ok(if moved { Step::Busy } else { Step::Idle })
    }
}
