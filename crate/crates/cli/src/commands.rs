use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flatdecode::bench::{attention_bench, best_point, default_b_n_sweep, gemm_bn_sweep};
use flatdecode::dispatch::{host_fingerprint, profile_shape, DispatchTable, KernelChoice, ProfileOptions};
use flatdecode::model::{LayerConfig, ModelPreset};
use flatdecode::pipeline::{fixed_table, run_decode, AttentionParams, DecodeInputs};
use flatdecode::report::{Record, Report};
use flatdecode::softmax::{calibrate as fit, load_samples, ScalingCalibration};
use flatdecode::timing::Sampler;
use flatdecode::verify::{run_all, VerifyOptions};
use flatdecode::{Error, GemmShape};

use crate::{BenchArgs, CalibrateArgs, DecodeArgs, ProfileArgs, Suite, VerifyArgs};

const DECODE_COVERAGE: f64 = 0.9999;
const QUICK_SWEEP: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Prints the human tables, then the records to `dest` or stdout.
fn emit(rep: &Report, kinds: &[&str], dest: Option<&Path>) -> Result<()> {
    for kind in kinds {
        print!("{}", rep.table(kind));
        println!();
    }
    match dest {
        Some(p) => fs::write(p, rep.to_text()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", rep.to_text()),
    }
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<bool> {
    let samples = match (&a.samples, &a.synthetic) {
        (Some(p), _) => load_samples(p).with_context(|| format!("reading samples from {}", p.display()))?,
        (None, Some(d)) => d.sample(a.count, a.seed),
        (None, None) => unreachable!("clap requires a source"),
    };
    let calib = match fit(&samples, a.coverage, a.margin) {
        Err(e @ Error::UncalibratableRange { .. }) => {
            bail!("{e}; run attention with --mode sync for this workload")
        }
        r => r?,
    };
    println!("samples     {}", samples.len());
    println!("phi         {}", calib.phi);
    println!("a           {}", calib.a);
    println!("b           {}", calib.b);
    println!("coverage    {:.6}", calib.coverage);
    println!("recompute   {:.3e}", 1.0 - calib.coverage);
    if let Some(out) = &a.out {
        calib.save(out).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote       {}", out.display());
    }
    Ok(true)
}

fn model_shapes(name: &str, scale: usize) -> Result<Vec<(usize, usize)>> {
    let model = ModelPreset::by_name(name)?.scaled(scale)?;
    let mut shapes = Vec::new();
    for (_, n, k) in model.gemm_shapes() {
        if !shapes.contains(&(n, k)) {
            shapes.push((n, k));
        }
    }
    Ok(shapes)
}

fn profile_table(
    shapes: &[(usize, usize)],
    opts: &ProfileOptions,
    workers: usize,
    rep: &mut Report,
) -> Result<DispatchTable> {
    let mut table = DispatchTable::new(host_fingerprint(workers));
    for &(n, k) in shapes {
        log::info!("profiling N={n} K={k}");
        let prof = profile_shape(n, k, opts, workers).with_context(|| format!("profiling shape N={n} K={k}"))?;
        for p in &prof.points {
            let mut r = Record::new("profile").with("n", n).with("k", k).with("m", p.m);
            for kernel in KernelChoice::ALL {
                r.push(&format!("{kernel}_us"), format!("{:.1}", p.median(kernel) * 1e6));
            }
            rep.push(r.with("dispatched", prof.entry.choose(p.m)));
        }
        rep.push(
            Record::new("entry")
                .with("n", n)
                .with("k", k)
                .with("m1", prof.entry.m1)
                .with("m2", prof.entry.m2)
                .with("worst_ratio", format!("{:.3}", prof.worst_dispatch_ratio())),
        );
        table.insert(prof.entry);
    }
    Ok(table)
}

pub fn profile(a: &ProfileArgs, workers: usize) -> Result<bool> {
    let shapes = match &a.model {
        Some(name) => model_shapes(name, a.scale)?,
        None => a.shapes.clone(),
    };
    let opts =
        ProfileOptions { m_sweep: a.m_sweep.clone(), reps: a.reps, warmup: a.warmup, retries: a.retries, seed: a.seed };
    let mut rep = Report::default();
    let table = profile_table(&shapes, &opts, workers, &mut rep)?;
    print!("{}", rep.table("profile"));
    println!();
    print!("{}", rep.table("entry"));
    if let Some(p) = &a.records {
        fs::write(p, rep.to_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(out) = &a.out {
        table.save(out).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {} entries to {}", table.len(), out.display());
    }
    Ok(true)
}

pub fn verify(a: &VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions { seed: a.seed, cases: a.cases, inject_faults: a.inject_faults };
    let (rep, results) = run_all(&opts);
    print!("{}", rep.table("suite"));
    println!();
    print!("{}", rep.to_text());
    if let Some(bad) = results.iter().find(|r| !r.passed()) {
        eprintln!("suite {} failed: {}", bad.name, bad.failure.as_deref().unwrap_or(""));
        return Ok(false);
    }
    Ok(true)
}

pub fn decode(a: &DecodeArgs, workers: usize) -> Result<bool> {
    let cfg = LayerConfig::preset(&a.model, a.batch, a.seq, a.scale)?;
    let calib = match &a.calib {
        Some(p) => ScalingCalibration::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let inputs = DecodeInputs::random(&cfg, a.seed)?;
            fit(&inputs.logit_samples()?, DECODE_COVERAGE, 1.0).context("calibrating on this step's logits")?
        }
    };
    let mut rep = Report::default();
    let table = match (&a.table, a.kernel) {
        (Some(p), _) => DispatchTable::load(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(k)) => fixed_table(&cfg, k)?,
        (None, None) => {
            log::warn!("no --table given; profiling the layer's shapes first");
            let opts = ProfileOptions {
                m_sweep: QUICK_SWEEP.to_vec(),
                reps: 3,
                warmup: 1,
                seed: a.seed,
                ..ProfileOptions::default()
            };
            profile_table(&model_shapes(&a.model, a.scale)?, &opts, workers, &mut rep)?
        }
    };
    let attn = AttentionParams { mode: a.mode, partitions: a.partitions, calib };
    let run = run_decode(&cfg, &attn, &table, workers, a.seed)?;
    rep.records.extend(run.report().records);
    emit(&rep, &["decode_gemm", "decode_attention", "decode"], a.records.as_deref())?;
    if !run.passed() {
        eprintln!("layer output differs from the oracle by {:.3e}", run.error);
    }
    Ok(run.passed())
}

pub fn bench(a: &BenchArgs, workers: usize) -> Result<bool> {
    if a.reps == 0 {
        bail!("--reps must be at least 1");
    }
    if a.reps < 3 {
        log::warn!("--reps {} is too few for a stable median; timings are unreliable", a.reps);
    }
    let sampler = Sampler { warmup: a.warmup, reps: a.reps, ..Sampler::default() };
    let mut rep = Report::default();
    match a.suite {
        Suite::Gemm => {
            let shapes = if a.shapes.is_empty() { vec![(8, 512, 4096), (8, 32768, 4096)] } else { a.shapes.clone() };
            for (m, n, k) in shapes {
                let shape = GemmShape::new(m, n, k)?;
                let b_ns = if a.b_n.is_empty() { default_b_n_sweep(n) } else { a.b_n.clone() };
                let pts = gemm_bn_sweep(shape, &b_ns, &sampler, a.seed)?;
                for p in &pts {
                    rep.push(p.record());
                }
                if let Some(best) = best_point(&pts) {
                    rep.push(
                        Record::new("bn_best")
                            .with("m", m)
                            .with("n", n)
                            .with("k", k)
                            .with("b_n", best.b_n)
                            .with("double_buffer", best.double_buffer)
                            .with("tiles", best.tiles)
                            .with("workers", workers)
                            .with("tiles_cover_workers", best.tiles >= workers)
                            .with("gflops", format!("{:.2}", best.gflops())),
                    );
                }
            }
            emit(&rep, &["bn_sweep", "bn_best"], a.records.as_deref())?;
        }
        Suite::Attn => {
            let shapes = if a.shapes.is_empty() { vec![(8, 4096, 128)] } else { a.shapes.clone() };
            for (batch, seq_len, head_dim) in shapes {
                let b = attention_bench(batch, seq_len, head_dim, a.partitions, &sampler, a.seed)?;
                if b.inverted() {
                    log::warn!("async attention slower than sync for {batch}:{seq_len}:{head_dim}");
                }
                rep.push(b.record());
            }
            emit(&rep, &["attn"], a.records.as_deref())?;
        }
    }
    Ok(true)
}
