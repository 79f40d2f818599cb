//! Pooling block: reduces each window channel-wise.

use alloc::string::String;
use alloc::vec::Vec;

use super::network::{Actor, ChannelId, Channels, Step};
use super::{Fault, LayerCtrl, OpKind, StreamPacket};
use crate::fxp::{div_round, FixedWord, Rounding};
use crate::model::PoolKind;

pub struct Pool {
    kind: PoolKind,
    depth: usize,
    window_words: usize,
    input: ChannelId,
    out: ChannelId,
    windows: usize,
    done: usize,
    buf: Vec<FixedWord>,
    result: Option<StreamPacket>,
}

/// Reduce one window laid out in window order; channel `z` is every
/// `depth`-th word starting at `z`. Ties keep the first value seen.
pub fn reduce(kind: PoolKind, window: &[FixedWord], depth: usize) -> Vec<FixedWord> {
    (0..depth)
        .map(|z| {
            let mut vals = window.iter().skip(z).step_by(depth).copied();
            let first = vals.next().expect("non-empty window");
            match kind {
                PoolKind::Max => vals.fold(first, |m, v| if v.raw() > m.raw() { v } else { m }),
                PoolKind::Min => vals.fold(first, |m, v| if v.raw() < m.raw() { v } else { m }),
                PoolKind::Avg => {
                    let mut sum = first.raw() as i128;
                    let mut n = 1i128;
                    for v in vals {
                        sum += v.raw() as i128;
                        n += 1;
                    }
                    FixedWord::saturating_from_raw(div_round(sum, n, Rounding::default()), first.format())
                }
            }
        })
        .collect()
}

impl Pool {
    pub fn new(ctrl: &LayerCtrl, input: ChannelId, out: ChannelId) -> Self {
        Self::with_windows(ctrl, input, out, ctrl.windows())
    }

    pub fn with_windows(ctrl: &LayerCtrl, input: ChannelId, out: ChannelId, windows: usize) -> Self {
        let kind = match ctrl.op {
            OpKind::Pool(k) => k,
            _ => PoolKind::Max,
        };
        Self {
            kind,
            depth: ctrl.depth,
            window_words: ctrl.window_words(),
            input,
            out,
            windows,
            done: 0,
            buf: Vec::new(),
            result: None,
        }
    }
}

impl Actor for Pool {
    fn name(&self) -> String {
        "pool".into()
    }

    fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
        let mut moved = false;
        loop {
            if let Some(r) = self.result.take() {
                if !ch.can_push(self.out) {
                    self.result = Some(r);
                    break;
                }
                ch.push(self.out, r);
                self.done += 1;
                moved = true;
            }
            if self.done == self.windows {
                return Ok(Step::Done);
            }
            let Some(p) = ch.pop(self.input) else { break };
            moved = true;
            self.buf.extend_from_slice(&p.words);
            if p.last {
                if self.buf.len() != self.window_words {
                    return Err(Fault::PoolWindow {
                        expected: self.window_words,
                        got: self.buf.len(),
                    });
                }
                let words = reduce(self.kind, &self.buf, self.depth);
                self.buf.clear();
                self.result = Some(StreamPacket::new(words, true));
            }
        }
        Ok(if moved { Step::Busy } else { Step::Idle })
    }
}
