//! Randomised property suites over every kernel, runnable from the CLI.
//!
//! Each suite draws `cases` random instances from its own seeded stream, so a
//! report depends only on the seed, case count and fault-injection count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    attention_reference_f64, decode_attention_async, decode_attention_sync, AttentionConfig, AttentionStats,
};
use crate::dispatch::{DispatchEntry, DispatchTable, KernelChoice};
use crate::error::Result;
use crate::gemm::{flat_gemm, TileConfig};
use crate::metrics::{magnitude_error, max_rel_error};
use crate::report::{Record, Report};
use crate::softmax::{partial_softmax_sync, softmax_reference_f64, softmax_unified, ScalingCalibration};
use crate::tensor::{gemm_magnitude, gemm_oracle_f64, Matrix};

pub const SOFTMAX_TOL: f64 = 1e-5;
pub const ATTENTION_TOL: f64 = 1e-5;
pub const GEMM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub cases: usize,
    /// Extra out-of-band rows fed to the recomputation suite.
    pub inject_faults: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, cases: 100, inject_faults: 0 }
    }
}

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// First violated property, if any.
    pub failure: Option<String>,
    pub extra: Vec<(&'static str, String)>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn record(&self) -> Record {
        let mut r = Record::new("suite")
            .with("name", self.name)
            .with("cases", self.cases)
            .with("status", if self.passed() { "PASS" } else { "FAIL" });
        for (k, v) in &self.extra {
            r.push(k, v);
        }
        if let Some(f) = &self.failure {
            r.push("failure", f);
        }
        r
    }
}

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib(e: crate::Error) -> String {
    e.to_string()
}

pub const SUITES: [&str; 8] = [
    "softmax-oracle",
    "phi-invariance",
    "attention-oracle",
    "recompute-soundness",
    "tiling-independence",
    "double-buffer-bitwise",
    "kernel-agreement",
    "dispatch-step-function",
];

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Option<SuiteResult> {
    let idx = SUITES.iter().position(|&s| s == name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(idx as u64 + 1)));
    let mut extra = Vec::new();
    let mut failure = None;
    for case in 0..opts.cases {
        let res = match idx {
            0 => softmax_oracle_case(&mut rng),
            1 => phi_invariance_case(&mut rng),
            2 => attention_oracle_case(&mut rng),
            3 => recompute_case(&mut rng, case % 3).map(drop),
            4 => tiling_case(&mut rng),
            5 => double_buffer_case(&mut rng),
            6 => kernel_agreement_case(&mut rng),
            _ => dispatch_case(&mut rng),
        };
        if let Err(msg) = res {
            failure = Some(format!("case {case}: {msg}"));
            break;
        }
    }
    if idx == 3 && failure.is_none() {
        let base: usize = (0..opts.cases).map(|c| c % 3).sum();
        let injected = match opts.inject_faults {
            0 => Ok(0),
            n => recompute_case(&mut rng, n),
        };
        match injected {
            Ok(extra_rows) => {
                extra.push(("injected", (base + opts.inject_faults).to_string()));
                extra.push(("recomputed", (base + extra_rows).to_string()));
            }
            Err(msg) => failure = Some(format!("injected case: {msg}")),
        }
    }
    Some(SuiteResult { name: SUITES[idx], cases: opts.cases, failure, extra })
}

/// Runs every suite in order.
pub fn run_all(opts: &VerifyOptions) -> (Report, Vec<SuiteResult>) {
    let results: Vec<SuiteResult> = SUITES.iter().map(|s| run_suite(s, opts).unwrap()).collect();
    let mut report = Report::default();
    report.push(
        Record::new("verify")
            .with("seed", opts.seed)
            .with("cases", opts.cases)
            .with("inject_faults", opts.inject_faults),
    );
    for r in &results {
        report.push(r.record());
    }
    (report, results)
}

fn normal_logits(rng: &mut ChaCha8Rng, len: usize, sigma: f32) -> Vec<f32> {
    let mu = rng.gen_range(-20.0f32..20.0);
    let d = Normal::new(mu, sigma).unwrap();
    (0..len).map(|_| d.sample(rng)).collect()
}

/// Random length biased towards short vectors but reaching 1024.
fn random_len(rng: &mut ChaCha8Rng) -> usize {
    if rng.gen_bool(0.5) {
        rng.gen_range(1..=16)
    } else {
        rng.gen_range(1..=1024)
    }
}

fn softmax_oracle_case(rng: &mut ChaCha8Rng) -> Check {
    let len = random_len(rng);
    let x = normal_logits(rng, len, 2.0);
    let want = softmax_reference_f64(&x).map_err(lib)?;
    let min = x.iter().copied().fold(f32::INFINITY, f32::min);
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    // any phi with every x - phi comfortably inside the exp range
    let phi = rng.gen_range(max - 40.0..=min + 40.0);
    let uni = softmax_unified(&x, phi).map_err(lib)?;
    let e = max_rel_error(&uni, &want);
    ensure(e <= SOFTMAX_TOL, || format!("unified softmax error {e:e} (len {}, phi {phi})", x.len()))?;
    let parts = rng.gen_range(1..=x.len().min(16));
    let sync = partial_softmax_sync(&x, parts).map_err(lib)?;
    let e = max_rel_error(&sync, &want);
    ensure(e <= SOFTMAX_TOL, || format!("sync softmax error {e:e} (len {}, parts {parts})", x.len()))
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn phi_invariance_case(rng: &mut ChaCha8Rng) -> Check {
    let len = random_len(rng);
    let x = normal_logits(rng, len, 2.0);
    let min = x.iter().copied().fold(f32::INFINITY, f32::min);
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let outs: Vec<Vec<f32>> = (0..5)
        .map(|_| softmax_unified(&x, rng.gen_range(max - 40.0..=min + 40.0)).map_err(lib))
        .collect::<std::result::Result<_, _>>()?;
    let first: Vec<f64> = outs[0].iter().map(|&v| v as f64).collect();
    for o in &outs[1..] {
        let e = max_rel_error(o, &first);
        ensure(e <= SOFTMAX_TOL, || format!("outputs differ by {e:e} between scaling factors"))?;
    }
    let want = argmax(&x);
    ensure(outs.iter().all(|o| o[want] == o[argmax(o)]), || "argmax changed with the scaling factor".into())
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::random(rows, cols, -1.0, 1.0, rng).unwrap()
}

fn check_attention(got: &[f32], q: &Matrix, k: &Matrix, v: &Matrix, scale: f32) -> Check {
    let r = attention_reference_f64(q, k, v, scale).map_err(lib)?;
    let e = magnitude_error(got, &r.out, &r.magnitude);
    ensure(e <= ATTENTION_TOL, || format!("attention error {e:e} vs f64 reference"))
}

fn attention_oracle_case(rng: &mut ChaCha8Rng) -> Check {
    let len = random_len(rng);
    let d = *[1usize, 4, 16, 64, 128].choose(rng).unwrap();
    let q = rand_matrix(rng, 1, d);
    let k = rand_matrix(rng, len, d);
    let v = rand_matrix(rng, len, d);
    let calib = ScalingCalibration::new(0.0, -40.0, 40.0, 1.0).map_err(lib)?;
    let cfg = AttentionConfig::for_head_dim(d, rng.gen_range(1..=len.min(16)), calib).map_err(lib)?;
    let (sync, _) = decode_attention_sync(q.row(0), &k, &v, &cfg).map_err(lib)?;
    check_attention(&sync, &q, &k, &v, cfg.scale)?;
    let (asy, stats) = decode_attention_async(q.row(0), &k, &v, &cfg).map_err(lib)?;
    ensure(stats == AttentionStats::default(), || format!("in-band row reported {stats:?}"))?;
    check_attention(&asy, &q, &k, &v, cfg.scale)
}

/// Eight rows with their own caches, `faults` of them given one key whose
/// logit lands above the band; returns the recompute count after checking
/// it equals `faults` and that every row matches the reference.
fn recompute_case(rng: &mut ChaCha8Rng, faults: usize) -> std::result::Result<usize, String> {
    let rows = faults.max(8);
    let (len, d) = (rng.gen_range(2..=256), 32);
    let calib = ScalingCalibration::new(0.0, -10.0, 10.0, 1.0).map_err(lib)?;
    let cfg = AttentionConfig::for_head_dim(d, rng.gen_range(1..=len.min(8)), calib).map_err(lib)?;
    let mut faulty: Vec<usize> = (0..rows).collect();
    faulty.shuffle(rng);
    faulty.truncate(faults);

    let mut recomputed = 0;
    for row in 0..rows {
        let q = rand_matrix(rng, 1, d);
        let mut kd = rand_matrix(rng, len, d).into_vec();
        let v = rand_matrix(rng, len, d);
        if faulty.contains(&row) {
            // key parallel to q with logit 15, above the band
            let j = rng.gen_range(0..len);
            let qq: f32 = q.row(0).iter().map(|x| x * x).sum();
            let c = 15.0 / (cfg.scale * qq);
            for (dst, &qv) in kd[j * d..(j + 1) * d].iter_mut().zip(q.row(0)) {
                *dst = c * qv;
            }
        }
        let k = Matrix::from_vec(len, d, kd).map_err(lib)?;
        let (out, stats) = decode_attention_async(q.row(0), &k, &v, &cfg).map_err(lib)?;
        check_attention(&out, &q, &k, &v, cfg.scale)?;
        recomputed += stats.rows_recomputed;
    }
    ensure(recomputed == faults, || format!("{faults} faulty rows but {recomputed} recomputed"))?;
    Ok(recomputed)
}

fn naive_f32(a: &Matrix, b: &Matrix) -> Vec<f32> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.get(i, kk);
            for j in 0..n {
                c[i * n + j] += av * b.get(kk, j);
            }
        }
    }
    c
}

fn check_gemm_oracle(got: &Matrix, a: &Matrix, b: &Matrix, what: &str) -> Check {
    let want = gemm_oracle_f64(a, b).map_err(lib)?;
    let mag = gemm_magnitude(a, b).map_err(lib)?;
    let e = magnitude_error(got.data(), &want, &mag);
    ensure(e <= GEMM_TOL, || format!("{what} error {e:e} for m={} n={} k={}", a.rows(), b.cols(), a.cols()))
}

fn random_gemm(rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let m = rng.gen_range(1..=16);
    let n = rng.gen_range(1..=300);
    let k = rng.gen_range(1..=300);
    (rand_matrix(rng, m, k), rand_matrix(rng, k, n))
}

fn random_tile(rng: &mut ChaCha8Rng, n: usize, k: usize, double_buffer: bool) -> TileConfig {
    let b_n = *[1usize, 2, 4, 8, 16, 24, 64, 128, 256].choose(rng).unwrap();
    let b_k = *[1usize, 3, 8, 32, 64, 100].choose(rng).unwrap();
    TileConfig::new(b_n, b_k, double_buffer).unwrap().clamped(n, k)
}

fn tiling_case(rng: &mut ChaCha8Rng) -> Check {
    let (a, b) = random_gemm(rng);
    let double_buffer = rng.gen_bool(0.5);
    let cfg = random_tile(rng, b.cols(), a.cols(), double_buffer);
    let c = flat_gemm(&a, &b, &cfg).map_err(lib)?;
    check_gemm_oracle(&c, &a, &b, "flat gemm")?;
    ensure(c.data() == naive_f32(&a, &b).as_slice(), || format!("tiling {cfg:?} changed the result"))
}

fn double_buffer_case(rng: &mut ChaCha8Rng) -> Check {
    let (a, b) = random_gemm(rng);
    let single = random_tile(rng, b.cols(), a.cols(), false);
    let double = TileConfig { double_buffer: true, ..single };
    let c1 = flat_gemm(&a, &b, &single).map_err(lib)?;
    let c2 = flat_gemm(&a, &b, &double).map_err(lib)?;
    ensure(c1 == c2, || format!("double buffering changed the result for {single:?}"))
}

fn kernel_agreement_case(rng: &mut ChaCha8Rng) -> Check {
    let (a, b) = random_gemm(rng);
    let workers = rng.gen_range(1..=8);
    for kind in KernelChoice::ALL {
        let c = kind.run(&a, &b, workers).map_err(lib)?;
        check_gemm_oracle(&c, &a, &b, &kind.to_string())?;
    }
    Ok(())
}

fn dispatch_case(rng: &mut ChaCha8Rng) -> Check {
    let m1 = rng.gen_range(1..=300);
    let m2 = rng.gen_range(m1..=400);
    let (n, k) = (rng.gen_range(1..=20000), rng.gen_range(1..=20000));
    let e = DispatchEntry::new(n, k, m1, m2).map_err(lib)?;
    let mut table = DispatchTable::new("verify");
    table.insert(e);
    let choices: Vec<KernelChoice> =
        (1..=512).map(|m| crate::dispatch::dispatch(m, n, k, &table)).collect::<Result<_>>().map_err(lib)?;
    ensure(choices.windows(2).all(|w| w[0] <= w[1]), || format!("non-monotone dispatch for {e:?}"))?;
    for (i, &c) in choices.iter().enumerate() {
        let m = i + 1;
        let want = if m < m1 {
            KernelChoice::ImplA
        } else if m < m2 {
            KernelChoice::ImplB
        } else {
            KernelChoice::ImplC
        };
        ensure(c == want, || format!("m={m} dispatched to {c}, expected {want} for {e:?}"))?;
    }
    let back = DispatchTable::parse(&table.to_text().map_err(lib)?, std::path::Path::new("verify")).map_err(lib)?;
    ensure(back == table, || "dispatch table did not round-trip".into())
}
