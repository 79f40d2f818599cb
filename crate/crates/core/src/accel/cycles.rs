//! Analytical cycle estimate for one pass.
//!
//! Every block is modeled as initiation interval one on its packets:
//!
//! * weight load: W beats of `pe_bw` words, before the data stream starts;
//! * data path: the slower of the X stream (`x_beat_words` per beat) and
//!   the PE array, which takes `ppf + 1` packages per kernel frame, one
//!   frame per window and replay group;
//! * pooling: windows cut into package-wide packets, one per cycle;
//! * a constant pipeline fill per pass.

use serde::{Deserialize, Serialize};

use super::{weight_stream_words, CnnaConfig, LayerCtrl};
use crate::model::packages_per_filter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleModel {
    /// Pipeline fill and drain per pass.
    pub fill: u64,
    /// Extra cycles per PE frame spent on requantization.
    pub frame_overhead: u64,
}

impl Default for CycleModel {
    fn default() -> Self {
        Self {
            fill: 32,
            frame_overhead: 0,
        }
    }
}

impl CycleModel {
    pub fn weight_load_cycles(&self, cfg: &CnnaConfig, ctrl: &LayerCtrl) -> u64 {
        weight_stream_words(cfg, ctrl).div_ceil(cfg.pe_bw) as u64
    }

    pub fn input_cycles(&self, ctrl: &LayerCtrl) -> u64 {
        (ctrl.input_words() / ctrl.x_beat_words) as u64
    }

    pub fn compute_cycles(&self, cfg: &CnnaConfig, ctrl: &LayerCtrl) -> u64 {
        let windows = ctrl.windows() as u64;
        if ctrl.uses_pe() {
            let ppf = packages_per_filter(ctrl.window_words(), cfg.package_words()) as u64;
            windows * ctrl.replay as u64 * (ppf + 1 + self.frame_overhead)
        } else {
            windows * ctrl.window_words().div_ceil(cfg.package_words()) as u64
        }
    }

    pub fn pass_cycles(&self, cfg: &CnnaConfig, ctrl: &LayerCtrl) -> u64 {
        self.fill + self.weight_load_cycles(cfg, ctrl) + self.input_cycles(ctrl).max(self.compute_cycles(cfg, ctrl))
    }
}
