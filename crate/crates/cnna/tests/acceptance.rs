//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails or overruns its time limit.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cnna::formats::{load_floats, load_model, save_weights};
use cnna::sweep_parallel;
use cnna::tables::load_json;
use cnna_core::accel::CnnaConfig;
use cnna_core::dse::{
    dominates, estimate_cost, reference_grid, BetaConfig, CostEstimate, CostModel, DeviceProfile, Workload,
};
use cnna_core::fxp::{quantize, FixedPointFormat, FixedWord};
use cnna_core::model::{layer_scale, preprocess_model, scale_weights, LayerKind, PreprocessOptions};
use cnna_core::oracle;
use cnna_core::qtrain::{
    lazy_steps_to_change, sgd_step_lazy, sgd_step_naive, train_toy, Precision, ShadowWeights, TrainConfig,
};
use cnna_core::scheduler::{plan_model_with, run_inference, split_ranges};
use cnna_core::synth::{random_layer, LayerBounds, LayerCase};
use cnna_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

const Q26: FixedPointFormat = FixedPointFormat::Q2_6;
const Q214: FixedPointFormat = FixedPointFormat::Q2_14;

fn quantizer() -> Outcome {
    let q = quantize(1.671875 - 0.0015624, Q26).map_err(|e| e.to_string())?;
    ensure(
        q.to_f64() == 1.671875 && q.raw() == 107,
        format!("worked example gave {}", q.to_f64()),
    )?;
    let mut words = 0;
    for int_bits in 1..=8 {
        let f = FixedPointFormat::new(int_bits, 8 - int_bits).unwrap();
        for raw in f.raw_min()..=f.raw_max() {
            let w = FixedWord::from_raw(raw, f).unwrap();
            let again = quantize(w.to_f64(), f).unwrap();
            ensure(again == w, format!("{f}: {raw} not idempotent"))?;
            words += 1;
        }
        // Quarter-LSB grid two units past both ends, so ties and saturation are covered.
        let step = f.lsb() / 4.0;
        let n = ((f.q_max() - f.q_min() + 4.0) / step) as i64;
        let mut prev = i32::MIN;
        for i in 0..=n {
            let x = f.q_min() - 2.0 + i as f64 * step;
            let r = quantize(x, f).unwrap().raw();
            ensure(r >= prev, format!("{f}: not monotone at {x}"))?;
            prev = r;
        }
    }
    Ok(format!(
        "Q2.6 example = 1.671875; {words} words idempotent and monotone over 8 formats"
    ))
}

fn autoscale() -> Outcome {
    let w = [0.11, 0.024, -0.30, -0.05, 0.002, 0.1];
    let s = layer_scale(&w, 1.0);
    ensure((s - 0.30).abs() < 1e-12, format!("scale {s}"))?;
    let scaled = scale_weights(&w, s).map_err(|e| e.to_string())?;
    let max = scaled.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure((max - 1.0).abs() < 1e-12, format!("max |w| {max}"))?;
    let printed = [0.3667, 0.08, -1.0, -0.1667, 0.00667, 0.3333];
    for (a, b) in scaled.iter().zip(printed) {
        ensure((a - b).abs() < 5e-4, format!("{a} vs printed {b}"))?;
    }
    Ok(format!("scale {s}, max |w/scale| = {max}"))
}

fn run_case(case: &LayerCase, cfg: &CnnaConfig, cap: usize) -> Result<Vec<FixedWord>, String> {
    let plan = plan_model_with(cfg, &case.model, &case.weights, cap).map_err(|e| e.to_string())?;
    let out = run_inference(&plan, &case.weights, &case.input, &Default::default()).map_err(|e| e.to_string())?;
    Ok(out.output().to_vec())
}

fn random_cfg(rng: &mut ChaCha8Rng, format: FixedPointFormat) -> CnnaConfig {
    CnnaConfig {
        format,
        pe_count: rng.random_range(1..=8),
        pe_bw: rng.random_range(1..=8),
        db_out: rng.random_range(1..=3),
        wb_packages: 1 << 20,
    }
}

fn oracle_equivalence() -> Outcome {
    const KINDS: [LayerKind; 5] = [
        LayerKind::Conv,
        LayerKind::Dense,
        LayerKind::MaxPool,
        LayerKind::MinPool,
        LayerKind::AvgPool,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let (mut words, mut mismatches, mut passes) = (0usize, 0usize, 0usize);
    let cases = 1200;
    for i in 0..cases {
        let format = if (i / KINDS.len()).is_multiple_of(2) { Q26 } else { Q214 };
        let case = random_layer(&mut rng, KINDS[i % KINDS.len()], format, LayerBounds::default());
        let cfg = random_cfg(&mut rng, format);
        let cap = rng.random_range(1..=16);
        let plan = plan_model_with(&cfg, &case.model, &case.weights, cap).map_err(|e| e.to_string())?;
        passes += plan.pass_count();
        let got = run_case(&case, &cfg, cap)?;
        let t = Tensor::from_vec(case.model.input_dims(), case.input.clone()).unwrap();
        let want = oracle::model_fixed(&case.model, &case.weights, &t).map_err(|e| e.to_string())?;
        let want = want[0].data();
        words += want.len();
        mismatches += want.len().abs_diff(got.len()) + want.iter().zip(&got).filter(|(a, b)| a != b).count();
    }
    ensure(mismatches == 0, format!("{mismatches} mismatching words"))?;
    Ok(format!("{cases} layers, {passes} passes, {words} words, 0 mismatches"))
}

fn stitch() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut report = Vec::new();
    for k in [2usize, 3, 5] {
        let mut done = 0;
        let mut words = 0;
        while done < 30 {
            let kind = if done % 3 == 2 {
                LayerKind::Dense
            } else {
                LayerKind::Conv
            };
            let format = if done % 2 == 0 { Q214 } else { Q26 };
            let case = random_layer(&mut rng, kind, format, LayerBounds::default());
            let filters = case.model.shapes().unwrap()[0].filters;
            let cap = filters.div_ceil(k);
            if filters < k || split_ranges(filters, cap).len() != k {
                continue;
            }
            let cfg = random_cfg(&mut rng, format);
            let whole = run_case(&case, &cfg, usize::MAX)?;
            let split = run_case(&case, &cfg, cap)?;
            ensure(
                whole == split,
                format!("k={k}: split output differs for {:?}", case.model),
            )?;
            words += whole.len();
            done += 1;
        }
        report.push(format!("k={k}: 30 layers/{words} words"));
    }
    Ok(format!("{}, bit-identical", report.join(", ")))
}

fn freeze() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 64;
    let w0: Vec<FixedWord> = (0..n)
        .map(|_| Q26.word(rng.random_range(-120..=120)).unwrap())
        .collect();
    let lr = 0.01;
    // |lr * g| stays below half an LSB (1/128).
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(-0.78..0.78)).collect();
    let mut naive = w0.clone();
    for _ in 0..1000 {
        naive = sgd_step_naive(&naive, &g, lr);
    }
    ensure(naive == w0, "naive quantized SGD moved a weight")?;

    let mut lazy = ShadowWeights::new(w0.iter().map(|w| w.to_f64()).collect(), lr, Q26);
    let mut first: Vec<Option<u64>> = vec![None; n];
    for step in 1..=1000u64 {
        sgd_step_lazy(&mut lazy, &g);
        for i in 0..n {
            if first[i].is_none() && lazy.wq[i] != w0[i] {
                first[i] = Some(step);
            }
        }
    }
    let mut changed = 0;
    for i in 0..n {
        let expected = lazy_steps_to_change(w0[i].to_f64(), lr * g[i], Q26).filter(|&s| s <= 1000);
        ensure(
            first[i] == expected,
            format!("weight {i}: changed at {:?}, expected {expected:?}", first[i]),
        )?;
        changed += first[i].is_some() as usize;
    }
    let example = lazy_steps_to_change(1.671875, 0.0015624, Q26);
    ensure(example == Some(6), format!("worked example escapes after {example:?}"))?;
    Ok(format!(
        "naive frozen for 1000 steps; lazy moved {changed}/{n} weights at the computed step"
    ))
}

fn training() -> Outcome {
    let fixed = |format, lazy, autoscale| TrainConfig {
        precision: Precision::Fixed {
            format,
            lazy,
            autoscale,
        },
        ..TrainConfig::default()
    };
    let acc = |cfg: &TrainConfig| train_toy(cfg).map(|r| r.last().train_acc).map_err(|e| e.to_string());
    let float = acc(&TrainConfig::default())?;
    let q214 = acc(&fixed(Q214, true, true))?;
    let q26 = acc(&fixed(Q26, false, false))?;
    let chance = 1.0 / TrainConfig::default().classes as f64;
    let line = format!(
        "float {:.1}%, Q2.14 lazy+autoscale {:.1}%, Q2.6 naive {:.1}% (chance {:.0}%)",
        100.0 * float,
        100.0 * q214,
        100.0 * q26,
        100.0 * chance
    );
    ensure(float >= 0.95, format!("float below 95%: {line}"))?;
    ensure(float - q214 <= 0.05, format!("Q2.14 more than 5 points behind: {line}"))?;
    ensure((q26 - chance).abs() <= 0.10, format!("Q2.6 not at chance: {line}"))?;
    Ok(line)
}

fn dse() -> Outcome {
    let device: DeviceProfile = load_json(&fixture("ultra96.json")).map_err(|e| e.to_string())?;
    let model = CostModel::default();
    let workload = Workload::default();
    let grid: cnna::tables::GridSpec = load_json(&fixture("table1_grid.json")).map_err(|e| e.to_string())?;
    let grid = grid.candidates();
    ensure(
        grid == reference_grid(),
        "bundled grid differs from the reference candidates",
    )?;
    let rows = sweep_parallel(&grid, &device, &model, &workload, false).map_err(|e| e.to_string())?;
    let pt = |e: &CostEstimate| (e.latency_ms, e.resource_avg_pct);
    let front: Vec<_> = rows.iter().filter(|r| r.pareto).collect();
    ensure(!front.is_empty(), "empty front")?;
    for p in &front {
        for q in &rows {
            ensure(
                !dominates(pt(&q.estimate), pt(&p.estimate)),
                format!("{:?} dominated", p.estimate.beta),
            )?;
        }
    }
    for r in rows.iter().filter(|r| !r.pareto) {
        ensure(
            rows.iter().any(|q| dominates(pt(&q.estimate), pt(&r.estimate))),
            format!("{:?} left off the front", r.estimate.beta),
        )?;
    }

    let est = |b: BetaConfig| estimate_cost(&b, &device, &model, &workload).map_err(|e| e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let b = BetaConfig::new(
            [8, 16, 32][rng.random_range(0..3)],
            [16, 32, 64, 128, 256][rng.random_range(0..5)],
            rng.random_range(1..=32),
            rng.random_range(1..=4),
            rng.random_range(8..=64),
        );
        let base = est(b)?;
        for (name, bigger) in [
            (
                "pe_count",
                BetaConfig {
                    pe_count: b.pe_count * 2,
                    ..b
                },
            ),
            (
                "pe_bw",
                BetaConfig {
                    pe_bw: b.pe_bw * 2,
                    ..b
                },
            ),
            (
                "kernels_capacity",
                BetaConfig {
                    kernels_capacity: b.kernels_capacity + 1,
                    ..b
                },
            ),
        ] {
            let e = est(bigger)?;
            if name != "kernels_capacity" {
                ensure(
                    e.latency_ms <= base.latency_ms,
                    format!("latency grows with {name} at {b:?}"),
                )?;
            }
            ensure(
                e.dsp >= base.dsp && e.bram >= base.bram,
                format!("resources shrink with {name} at {b:?}"),
            )?;
        }
    }

    let over = est(BetaConfig::new(16, 128, 16, 3, 32))?;
    let under = est(BetaConfig::new(16, 128, 8, 3, 32))?;
    ensure(
        !over.feasible,
        format!("[16,128,16,3,32] feasible ({} DSP, {} BRAM)", over.dsp, over.bram),
    )?;
    ensure(under.feasible, "[16,128,8,3,32] infeasible")?;
    Ok(format!(
        "12 candidates, {} on the front, none dominated; 100-point monotonicity holds; [16,128,16,3,32] infeasible ({} DSP > {})",
        front.len(),
        over.dsp,
        device.dsp
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = load_model(&fixture("toy_model.json")).map_err(|e| e.to_string())?;
    let floats = load_floats(&fixture("toy_floats.cnnf")).map_err(|e| e.to_string())?;
    let (weights, _) =
        preprocess_model(&model, &floats, PreprocessOptions::new(Q214, true)).map_err(|e| e.to_string())?;
    let wpath = dir.path().join("toy.cnna");
    save_weights(&wpath, &weights).map_err(|e| e.to_string())?;
    let run = |cap: &str, split: &str| {
        let out = dir.path().join(format!("y_{cap}_{split}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_cnna"))
            .args(["infer", "--model"])
            .arg(fixture("toy_model.json"))
            .arg("--weights")
            .arg(&wpath)
            .arg("--input")
            .arg(fixture("toy_image.bin"))
            .arg("--config")
            .arg(fixture("toy_beta.json"))
            .args(["--channel-capacity", cap, "--max-kernels-per-pass", split, "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(
            status.status.success(),
            String::from_utf8_lossy(&status.stderr).into_owned(),
        )?;
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let base = run("16", "16")?;
    let mut runs = 1;
    for (cap, split) in [("16", "16"), ("1", "16"), ("2", "16"), ("1", "1"), ("7", "3")] {
        ensure(
            run(cap, split)? == base,
            format!("capacity {cap}, split {split} differs"),
        )?;
        runs += 1;
    }
    Ok(format!(
        "{runs} infer runs over capacities {{1,2,7,16}} byte-identical ({} bytes)",
        base.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("quantizer exactness", quantizer, Duration::from_secs(1)),
        ("auto-scale example", autoscale, Duration::from_secs(1)),
        ("oracle equivalence", oracle_equivalence, Duration::from_secs(60)),
        ("stitch equivalence", stitch, Duration::from_secs(60)),
        ("freeze/non-freeze", freeze, Duration::from_secs(10)),
        ("toy training trend", training, Duration::from_secs(120)),
        ("dse correctness", dse, Duration::from_secs(30)),
        ("determinism", determinism, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (name, f, limit) in criteria {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let took = t.elapsed();
        let res = match res {
            Ok(_) if took > limit => Err(format!("took {:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs())),
            r => r,
        };
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "{tag} {name} [{:.2}s / {}s]: {detail}",
            took.as_secs_f64(),
            limit.as_secs()
        );
        failed += res.is_err() as usize;
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
