//! JSON configuration inputs and CSV outputs.

use std::path::Path;

use cnna_core::accel::{TraceEvent, TraceKind};
use cnna_core::dse::{factorial, BetaConfig, SweepRow};
use cnna_core::fxp::FixedWord;
use cnna_core::qtrain::EpochRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

/// A candidate as an object or as `[data_size, pe_bw, pe_count, db_out, kernels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaEntry {
    Array([usize; 5]),
    Object(BetaConfig),
}

impl From<BetaEntry> for BetaConfig {
    fn from(e: BetaEntry) -> Self {
        match e {
            BetaEntry::Array(a) => a.into(),
            BetaEntry::Object(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorialGrid {
    pub data_size: Vec<u32>,
    pub pe_bw: Vec<usize>,
    pub pe_count: Vec<usize>,
    pub db_out: Vec<usize>,
    pub kernels_capacity: Vec<usize>,
}

/// Either an explicit candidate list or the axes of a full factorial sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<BetaEntry>),
    Factorial(FactorialGrid),
}

impl GridSpec {
    pub fn candidates(&self) -> Vec<BetaConfig> {
        match self {
            GridSpec::List(v) => v.iter().map(|&e| e.into()).collect(),
            GridSpec::Factorial(g) => factorial(&g.data_size, &g.pe_bw, &g.pe_count, &g.db_out, &g.kernels_capacity),
        }
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "data_size",
        "pe_bw",
        "pe_count",
        "db_out",
        "kernels_cap",
        "latency_ms",
        "dsp",
        "bram",
        "resource_avg_pct",
        "feasible",
        "pareto",
    ])?;
    for r in rows {
        let e = &r.estimate;
        let b = &e.beta;
        w.write_record([
            b.data_size.to_string(),
            b.pe_bw.to_string(),
            b.pe_count.to_string(),
            b.db_out.to_string(),
            b.kernels_capacity.to_string(),
            format!("{:.6}", e.latency_ms),
            e.dsp.to_string(),
            e.bram.to_string(),
            format!("{:.3}", e.resource_avg_pct),
            e.feasible.to_string(),
            r.pareto.to_string(),
        ])?;
    }
    finish(w)
}

pub fn curve_csv(curve: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_acc", "val_acc", "loss"])?;
    for r in curve {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.train_acc),
            format!("{:.6}", r.val_acc),
            format!("{:.6}", r.loss),
        ])?;
    }
    finish(w)
}

/// Trace events of one pass, tagged with layer and pass.
pub struct PassTrace<'a> {
    pub layer: usize,
    pub pass: usize,
    pub events: &'a [TraceEvent],
}

pub fn trace_csv(passes: &[PassTrace<'_>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "pass",
        "round",
        "channel",
        "event",
        "words",
        "last",
        "occupancy",
    ])?;
    for p in passes {
        for e in p.events {
            let kind = match e.kind {
                TraceKind::Push => "push",
                TraceKind::Pop => "pop",
            };
            w.write_record([
                p.layer.to_string(),
                p.pass.to_string(),
                e.cycle.to_string(),
                e.channel.clone(),
                kind.to_string(),
                e.words.to_string(),
                e.last.to_string(),
                e.occupancy.to_string(),
            ])?;
        }
    }
    finish(w)
}

pub fn scores_csv(words: &[FixedWord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "raw", "value"])?;
    for (i, x) in words.iter().enumerate() {
        w.write_record([i.to_string(), x.raw().to_string(), x.to_f64().to_string()])?;
    }
    finish(w)
}
