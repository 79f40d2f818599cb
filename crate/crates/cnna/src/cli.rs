use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cnna_core::accel::{CnnaConfig, ExecOptions, DEFAULT_CHANNEL_CAPACITY};
use cnna_core::dse::{reference_grid, BetaConfig, CostModel, DeviceProfile, Workload};
use cnna_core::fxp::{FixedPointFormat, FixedWord};
use cnna_core::model::{preprocess_model, LayerWeights, ModelSpec, PreprocessOptions};
use cnna_core::oracle::{model_fixed, quantize_tensor};
use cnna_core::qtrain::{train_toy, Precision, TrainConfig};
use cnna_core::scheduler::{plan_model_with, run_inference, InferenceOutput};

use crate::error::{Error, Result};
use crate::formats::{load_floats, load_image, load_model, load_weights, save_weights, write_file};
use crate::sweep_parallel;
use crate::tables::{curve_csv, load_json, scores_csv, sweep_csv, trace_csv, BetaEntry, GridSpec, PassTrace};

#[derive(Debug, Parser)]
#[command(name = "cnna", version, about = "Stream-level CNN accelerator model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize float weights into a weights file.
    Preprocess(PreprocessArgs),
    /// Run a model on the accelerator model.
    Infer(InferArgs),
    /// Train the toy classifier and write its learning curve.
    TrainToy(TrainArgs),
    /// Sweep accelerator candidates and mark the Pareto front.
    Dse(DseArgs),
    /// Run a model and dump the channel trace.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "weights-in")]
    pub weights_in: PathBuf,
    #[arg(long, default_value = "Q2.14")]
    pub format: FixedPointFormat,
    /// Format of the per-layer scale word; defaults to the data format.
    #[arg(long)]
    pub scale_format: Option<FixedPointFormat>,
    #[arg(long)]
    pub autoscale: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Raw little-endian f32 image.
    #[arg(long)]
    pub input: PathBuf,
    /// Accelerator candidate, JSON object or five-element array.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CHANNEL_CAPACITY)]
    pub channel_capacity: usize,
    /// Split layers into passes of at most this many kernels.
    #[arg(long)]
    pub max_kernels_per_pass: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Compare every layer against the direct reference.
    #[arg(long)]
    pub check_oracle: bool,
    /// Output scores CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub trace: PathBuf,
    /// Only this layer; every layer when absent.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Dataset {
    Blobs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub dataset: Dataset,
    /// Fixed-point format; float training when absent.
    #[arg(long)]
    pub format: Option<FixedPointFormat>,
    #[arg(long)]
    pub lazy: bool,
    #[arg(long)]
    pub autoscale: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DseArgs {
    /// Candidate list or factorial axes; the twelve reference candidates when absent.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Device profile; Ultra96 when absent.
    #[arg(long)]
    pub device: Option<PathBuf>,
    /// Model constants overriding the defaults.
    #[arg(long)]
    pub cost_model: Option<PathBuf>,
    #[arg(long)]
    pub workload: Option<PathBuf>,
    /// Leave infeasible candidates out of the front.
    #[arg(long)]
    pub feasible_front: bool,
    #[arg(long)]
    pub pareto_only: bool,
    /// Sweep CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_file(p, bytes),
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Infer(a) => infer(a),
        Command::TrainToy(a) => train(a),
        Command::Dse(a) => dse(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let floats = load_floats(&a.weights_in)?;
    let mut opts = PreprocessOptions::new(a.format, a.autoscale);
    if let Some(f) = a.scale_format {
        opts.scale_format = f;
    }
    let (weights, stats) = preprocess_model(&model, &floats, opts)?;
    for s in &stats {
        eprintln!("layer {}: scale {} saturated {}", s.index, s.scale, s.saturated);
    }
    save_weights(&a.out, &weights)
}

/// Everything one accelerator run needs, loaded and checked.
pub struct Loaded {
    pub model: ModelSpec,
    pub weights: Vec<LayerWeights>,
    pub input: Vec<FixedWord>,
    pub cfg: CnnaConfig,
}

pub fn accel_config(beta: &BetaConfig, format: FixedPointFormat) -> Result<CnnaConfig> {
    beta.validate()?;
    if beta.data_size != format.word_bits() {
        return Err(Error::Usage(format!(
            "config data size {} does not match {format} weights",
            beta.data_size
        )));
    }
    let cfg = CnnaConfig {
        format,
        ..beta.accel_config()
    };
    Ok(cfg)
}

pub fn load_run(a: &RunArgs) -> Result<Loaded> {
    let model = load_model(&a.model)?;
    let weights = load_weights(&a.weights)?;
    let beta: BetaConfig = load_json::<BetaEntry>(&a.config)?.into();
    let format = weights.first().map(|w| w.format).unwrap_or(beta.format());
    let cfg = accel_config(&beta, format)?;
    let image = load_image(&a.input, model.input_dims())?;
    let input = quantize_tensor(&image, format)?.into_data();
    Ok(Loaded {
        model,
        weights,
        input,
        cfg,
    })
}

pub fn execute(l: &Loaded, a: &RunArgs, trace: bool) -> Result<InferenceOutput> {
    if a.channel_capacity == 0 {
        return Err(Error::Usage("channel capacity must be positive".into()));
    }
    let cap = a.max_kernels_per_pass.unwrap_or(usize::MAX);
    if cap == 0 {
        return Err(Error::Usage("max kernels per pass must be positive".into()));
    }
    let plan = plan_model_with(&l.cfg, &l.model, &l.weights, cap)?;
    let opts = ExecOptions {
        channel_capacity: a.channel_capacity,
        trace,
        ..ExecOptions::default()
    };
    Ok(run_inference(&plan, &l.weights, &l.input, &opts)?)
}

/// Words of every layer output that differ from the direct reference.
pub fn oracle_mismatches(l: &Loaded, out: &InferenceOutput) -> Result<usize> {
    let dims = l.model.input_dims();
    let input = cnna_core::tensor::Tensor::from_vec(dims, l.input.clone()).expect("input length checked");
    let reference = model_fixed(&l.model, &l.weights, &input)?;
    Ok(reference
        .iter()
        .zip(&out.layers)
        .map(|(r, y)| {
            let len_diff = r.data().len().abs_diff(y.len());
            len_diff + r.data().iter().zip(y).filter(|(a, b)| a != b).count()
        })
        .sum())
}

fn infer(a: InferArgs) -> Result<()> {
    let l = load_run(&a.run)?;
    let out = execute(&l, &a.run, false)?;
    eprintln!("{} passes, {} modeled cycles", out.passes.len(), out.modeled_cycles());
    emit(a.out.as_deref(), &scores_csv(out.output())?)?;
    if a.check_oracle {
        let n = oracle_mismatches(&l, &out)?;
        eprintln!("{n} mismatching words");
        if n > 0 {
            return Err(Error::OracleMismatch(n));
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let l = load_run(&a.run)?;
    if let Some(layer) = a.layer {
        if layer >= l.model.layers.len() {
            return Err(Error::Usage(format!("model has {} layers", l.model.layers.len())));
        }
    }
    let out = execute(&l, &a.run, true)?;
    let passes: Vec<PassTrace<'_>> = out
        .passes
        .iter()
        .filter(|p| a.layer.is_none_or(|n| n == p.layer))
        .map(|p| PassTrace {
            layer: p.layer,
            pass: p.pass,
            events: p.trace.as_deref().unwrap_or(&[]),
        })
        .collect();
    write_file(&a.trace, &trace_csv(&passes)?)
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    if let Some(format) = a.format {
        cfg.precision = Precision::Fixed {
            format,
            lazy: a.lazy,
            autoscale: a.autoscale,
        };
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg
}

fn train(a: TrainArgs) -> Result<()> {
    let Dataset::Blobs = a.dataset;
    if a.format.is_none() && (a.lazy || a.autoscale) {
        return Err(Error::Usage("--lazy and --autoscale need --format".into()));
    }
    let report = train_toy(&train_config(&a))?;
    let last = report.last();
    eprintln!(
        "epoch {}: train {:.4} val {:.4} loss {:.4}",
        last.epoch, last.train_acc, last.val_acc, last.loss
    );
    write_file(&a.out, &curve_csv(&report.curve)?)
}

fn dse(a: DseArgs) -> Result<()> {
    let grid = match &a.grid {
        Some(p) => load_json::<GridSpec>(p)?.candidates(),
        None => reference_grid(),
    };
    let device = match &a.device {
        Some(p) => load_json(p)?,
        None => DeviceProfile::ultra96(),
    };
    let model: CostModel = match &a.cost_model {
        Some(p) => load_json(p)?,
        None => CostModel::default(),
    };
    let workload: Workload = match &a.workload {
        Some(p) => load_json(p)?,
        None => Workload::default(),
    };
    let mut rows = sweep_parallel(&grid, &device, &model, &workload, a.feasible_front)?;
    let front = rows.iter().filter(|r| r.pareto).count();
    eprintln!("{} candidates, {front} on the front", rows.len());
    if a.pareto_only {
        rows.retain(|r| r.pareto);
    }
    emit(a.out.as_deref(), &sweep_csv(&rows)?)
}
