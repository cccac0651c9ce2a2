//! A single decoder layer executed for one decode step.
//!
//! `x -> KQV projection -> per-head attention over the KV cache -> O
//! projection -> FFN1 -> FFN2`, with every GEMM routed through the dispatch
//! table. Weights, activations and the cache are random; no nonlinearity or
//! normalisation is applied between the GEMMs.

use std::time::Instant;

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{
    attention_reference, decode_attention_async, decode_attention_sync, AttentionConfig, AttentionMode, AttentionStats,
};
use crate::dispatch::{dispatched_gemm, DispatchTable, KernelChoice};
use crate::error::{Error, Result};
use crate::metrics::normwise_error;
use crate::model::{LayerConfig, LayerOp};
use crate::report::{Record, Report};
use crate::softmax::ScalingCalibration;
use crate::tensor::{gemm_oracle, Matrix};

/// Weight matrices stored `K x N`, so activations multiply from the left.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub kqv: Matrix,
    pub o_proj: Matrix,
    pub ffn1: Matrix,
    pub ffn2: Matrix,
}

impl LayerWeights {
    pub fn get(&self, op: LayerOp) -> &Matrix {
        match op {
            LayerOp::Kqv => &self.kqv,
            LayerOp::OProj => &self.o_proj,
            LayerOp::Ffn1 => &self.ffn1,
            LayerOp::Ffn2 => &self.ffn2,
        }
    }
}

/// Everything a decode step consumes.
#[derive(Clone, Debug)]
pub struct DecodeInputs {
    pub cfg: LayerConfig,
    /// `batch x hidden` activations of the new tokens.
    pub x: Matrix,
    pub weights: LayerWeights,
    /// Cached keys per `(batch, head)`, `(seq_len - 1) x head_dim`, row-major.
    pub past_k: Vec<Vec<f32>>,
    pub past_v: Vec<Vec<f32>>,
}

impl DecodeInputs {
    /// Uniform activations and cache in `[-1, 1]`; weights scaled by
    /// `1 / sqrt(K)` so every layer output stays O(1).
    pub fn random(cfg: &LayerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = &cfg.model;
        let x = Matrix::random(cfg.batch, m.hidden, -1.0, 1.0, &mut rng)?;
        let mut weight = |op: LayerOp| -> Result<Matrix> {
            let (_, n, k) = m.gemm_shapes().into_iter().find(|s| s.0 == op).unwrap();
            let r = 1.0 / (k as f32).sqrt();
            Matrix::random(k, n, -r, r, &mut rng)
        };
        let weights = LayerWeights {
            kqv: weight(LayerOp::Kqv)?,
            o_proj: weight(LayerOp::OProj)?,
            ffn1: weight(LayerOp::Ffn1)?,
            ffn2: weight(LayerOp::Ffn2)?,
        };
        let past = (cfg.seq_len - 1) * m.head_dim();
        let heads = cfg.batch * m.n_heads;
        let unit = Uniform::new_inclusive(-1.0f32, 1.0);
        let mut cache =
            || -> Vec<Vec<f32>> { (0..heads).map(|_| (&mut rng).sample_iter(unit).take(past).collect()).collect() };
        let past_k = cache();
        let past_v = cache();
        Ok(Self { cfg: cfg.clone(), x, weights, past_k, past_v })
    }

    /// Query row and full K/V (cache plus the new token) of one head, taken
    /// from a KQV projection output laid out as `[q | k | v]`.
    fn head(&self, kqv: &Matrix, b: usize, h: usize) -> Result<(Vec<f32>, Matrix, Matrix)> {
        let d = self.cfg.model.hidden;
        let hd = self.cfg.model.head_dim();
        let row = kqv.row(b);
        let col = h * hd;
        let slot = b * self.cfg.model.n_heads + h;
        let with_new = |past: &[f32], new: &[f32]| {
            let mut data = Vec::with_capacity(past.len() + hd);
            data.extend_from_slice(past);
            data.extend_from_slice(new);
            Matrix::from_vec(self.cfg.seq_len, hd, data)
        };
        let k = with_new(&self.past_k[slot], &row[d + col..d + col + hd])?;
        let v = with_new(&self.past_v[slot], &row[2 * d + col..2 * d + col + hd])?;
        Ok((row[col..col + hd].to_vec(), k, v))
    }

    /// Attention logits of every head for this input, computed with oracle
    /// GEMMs; a calibration set for the unified scaling factor.
    pub fn logit_samples(&self) -> Result<Vec<f32>> {
        let kqv = gemm_oracle(&self.x, &self.weights.kqv)?;
        let scale = 1.0 / (self.cfg.model.head_dim() as f32).sqrt();
        let mut out = Vec::with_capacity(self.cfg.batch * self.cfg.model.n_heads * self.cfg.seq_len);
        for b in 0..self.cfg.batch {
            for h in 0..self.cfg.model.n_heads {
                let (q, k, _) = self.head(&kqv, b, h)?;
                for i in 0..k.rows() {
                    let s: f64 = q.iter().zip(k.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum();
                    out.push(scale * s as f32);
                }
            }
        }
        Ok(out)
    }
}

/// How the attention stage runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub mode: AttentionMode,
    /// Requested split of the KV cache; clamped to the sequence length.
    pub partitions: usize,
    pub calib: ScalingCalibration,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GemmRecord {
    pub op: LayerOp,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub kernel: KernelChoice,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// `batch x hidden` layer output.
    pub out: Matrix,
    pub gemms: Vec<GemmRecord>,
    pub attention_seconds: f64,
    pub attention: AttentionStats,
}

fn attention_stage(
    inputs: &DecodeInputs,
    kqv: &Matrix,
    head_fn: impl Fn(&[f32], &Matrix, &Matrix) -> Result<(Vec<f32>, AttentionStats)> + Sync,
) -> Result<(Matrix, AttentionStats)> {
    let (batch, heads) = (inputs.cfg.batch, inputs.cfg.model.n_heads);
    let hd = inputs.cfg.model.head_dim();
    let outs: Vec<(Vec<f32>, AttentionStats)> = (0..batch * heads)
        .into_par_iter()
        .map(|slot| {
            let (q, k, v) = inputs.head(kqv, slot / heads, slot % heads)?;
            head_fn(&q, &k, &v)
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(batch * heads * hd);
    let mut stats = AttentionStats::default();
    for (o, s) in outs {
        data.extend(o);
        stats += s;
    }
    Ok((Matrix::from_vec(batch, heads * hd, data)?, stats))
}

/// Runs the layer with dispatched GEMMs and the selected attention kernel.
pub fn decode_step(
    inputs: &DecodeInputs,
    attn: &AttentionParams,
    table: &DispatchTable,
    workers: usize,
) -> Result<DecodeOutput> {
    let model = &inputs.cfg.model;
    let cfg =
        AttentionConfig::for_head_dim(model.head_dim(), attn.partitions.clamp(1, inputs.cfg.seq_len), attn.calib)?;
    // fail before any work if the table lacks a shape
    for (_, n, k) in model.gemm_shapes() {
        crate::dispatch::dispatch(inputs.cfg.batch, n, k, table)?;
    }

    let mut gemms = Vec::with_capacity(4);
    let mut gemm = |op: LayerOp, a: &Matrix| -> Result<Matrix> {
        let w = inputs.weights.get(op);
        let t = Instant::now();
        let (c, kernel) = dispatched_gemm(a, w, table, workers)?;
        gemms.push(GemmRecord {
            op,
            m: a.rows(),
            n: w.cols(),
            k: w.rows(),
            kernel,
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(c)
    };

    let kqv = gemm(LayerOp::Kqv, &inputs.x)?;
    let t = Instant::now();
    let (ctx, stats) = match attn.mode {
        AttentionMode::Reference => attention_stage(inputs, &kqv, |q, k, v| {
            let q = Matrix::from_vec(1, q.len(), q.to_vec())?;
            Ok((attention_reference(&q, k, v, cfg.scale)?.into_vec(), AttentionStats::default()))
        })?,
        AttentionMode::Sync => attention_stage(inputs, &kqv, |q, k, v| decode_attention_sync(q, k, v, &cfg))?,
        AttentionMode::Async => attention_stage(inputs, &kqv, |q, k, v| decode_attention_async(q, k, v, &cfg))?,
    };
    let attention_seconds = t.elapsed().as_secs_f64();
    let o = gemm(LayerOp::OProj, &ctx)?;
    let f1 = gemm(LayerOp::Ffn1, &o)?;
    let out = gemm(LayerOp::Ffn2, &f1)?;
    Ok(DecodeOutput { out, gemms, attention_seconds, attention: stats })
}

/// The same layer with `f64`-accumulating GEMMs and `f64` attention.
pub fn decode_step_oracle(inputs: &DecodeInputs) -> Result<Matrix> {
    let scale = 1.0 / (inputs.cfg.model.head_dim() as f32).sqrt();
    let w = &inputs.weights;
    let kqv = gemm_oracle(&inputs.x, &w.kqv)?;
    let (ctx, _) = attention_stage(inputs, &kqv, |q, k, v| {
        let q = Matrix::from_vec(1, q.len(), q.to_vec())?;
        Ok((attention_reference(&q, k, v, scale)?.into_vec(), AttentionStats::default()))
    })?;
    let o = gemm_oracle(&ctx, &w.o_proj)?;
    let f1 = gemm_oracle(&o, &w.ffn1)?;
    gemm_oracle(&f1, &w.ffn2)
}

/// A table sending every shape of `cfg` to `kernel` at the configured batch.
pub fn fixed_table(cfg: &LayerConfig, kernel: KernelChoice) -> Result<DispatchTable> {
    use crate::dispatch::DispatchEntry;
    let m = cfg.batch;
    let (m1, m2) = match kernel {
        KernelChoice::ImplA => (m + 1, m + 1),
        KernelChoice::ImplB => (m, m + 1),
        KernelChoice::ImplC => (1, 1),
    };
    let mut t = DispatchTable::new(format!("fixed-{kernel}"));
    for (_, n, k) in cfg.model.gemm_shapes() {
        if t.get(n, k).is_none() {
            t.insert(DispatchEntry::new(n, k, m1, m2)?);
        }
    }
    if t.is_empty() {
        return Err(Error::InvalidArgument("model has no GEMM shapes".into()));
    }
    Ok(t)
}

/// Largest accepted `max |out - oracle| / max |oracle|` for a whole layer.
pub const LAYER_TOL: f64 = 1e-4;

/// A decode step checked against the oracle pipeline.
#[derive(Clone, Debug)]
pub struct DecodeRun {
    pub cfg: LayerConfig,
    pub mode: AttentionMode,
    pub output: DecodeOutput,
    /// Normwise error against [`decode_step_oracle`].
    pub error: f64,
}

impl DecodeRun {
    pub fn passed(&self) -> bool {
        self.error <= LAYER_TOL
    }

    pub fn report(&self) -> Report {
        let mut rep = Report::default();
        for g in &self.output.gemms {
            rep.push(
                Record::new("decode_gemm")
                    .with("op", g.op)
                    .with("m", g.m)
                    .with("n", g.n)
                    .with("k", g.k)
                    .with("kernel", g.kernel)
                    .with("time_us", format!("{:.1}", g.seconds * 1e6)),
            );
        }
        let st = &self.output.attention;
        rep.push(
            Record::new("decode_attention")
                .with("mode", self.mode)
                .with("heads", self.cfg.batch * self.cfg.model.n_heads)
                .with("seq_len", self.cfg.seq_len)
                .with("time_us", format!("{:.1}", self.output.attention_seconds * 1e6))
                .with("rows_recomputed", st.rows_recomputed)
                .with("rescale_ops", st.rescale_ops)
                .with("max_reductions", st.max_reductions),
        );
        rep.push(
            Record::new("decode")
                .with("model", &self.cfg.model.name)
                .with("hidden", self.cfg.model.hidden)
                .with("heads", self.cfg.model.n_heads)
                .with("ffn", self.cfg.model.ffn)
                .with("batch", self.cfg.batch)
                .with("seq_len", self.cfg.seq_len)
                .with("mode", self.mode)
                .with("oracle_error", format!("{:.3e}", self.error))
                .with("tolerance", format!("{LAYER_TOL:e}"))
                .with("status", if self.passed() { "PASS" } else { "FAIL" }),
        );
        rep
    }
}

/// Builds seeded inputs, runs the layer and compares it with the oracle.
pub fn run_decode(
    cfg: &LayerConfig,
    attn: &AttentionParams,
    table: &DispatchTable,
    workers: usize,
    seed: u64,
) -> Result<DecodeRun> {
    let inputs = DecodeInputs::random(cfg, seed)?;
    let output = decode_step(&inputs, attn, table, workers)?;
    let oracle = decode_step_oracle(&inputs)?;
    let error = normwise_error(output.out.data(), oracle.data());
    Ok(DecodeRun { cfg: cfg.clone(), mode: attn.mode, output, error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softmax::calibrate;

    fn small(batch: usize, seq: usize) -> LayerConfig {
        let model = crate::model::ModelPreset::by_name("llama2-7b").unwrap().scaled(16).unwrap();
        LayerConfig::new(model, batch, seq).unwrap()
    }

    fn params(inputs: &DecodeInputs, mode: AttentionMode) -> AttentionParams {
        let calib = calibrate(&inputs.logit_samples().unwrap(), 0.9999, 1.0).unwrap();
        AttentionParams { mode, partitions: 4, calib }
    }

    #[test]
    fn matches_oracle_for_every_kernel() {
        let cfg = small(3, 40);
        let inputs = DecodeInputs::random(&cfg, 7).unwrap();
        let want = decode_step_oracle(&inputs).unwrap();
        for kernel in KernelChoice::ALL {
            let table = fixed_table(&cfg, kernel).unwrap();
            let got = decode_step(&inputs, &params(&inputs, AttentionMode::Async), &table, 2).unwrap();
            assert!(got.gemms.iter().all(|g| g.kernel == kernel));
            let err = normwise_error(got.out.data(), want.data());
            assert!(err <= 1e-4, "{kernel}: {err}");
        }
    }

    #[test]
    fn modes_agree_and_async_skips_rescaling() {
        let cfg = small(2, 33);
        let inputs = DecodeInputs::random(&cfg, 8).unwrap();
        let table = fixed_table(&cfg, KernelChoice::ImplB).unwrap();
        let a = decode_step(&inputs, &params(&inputs, AttentionMode::Async), &table, 1).unwrap();
        let s = decode_step(&inputs, &params(&inputs, AttentionMode::Sync), &table, 1).unwrap();
        let r = decode_step(&inputs, &params(&inputs, AttentionMode::Reference), &table, 1).unwrap();
        assert!(normwise_error(a.out.data(), s.out.data()) <= 1e-5);
        assert!(normwise_error(r.out.data(), s.out.data()) <= 1e-5);
        assert_eq!(a.attention, AttentionStats::default());
        assert_eq!(s.attention.rescale_ops, 2 * cfg.model.n_heads * 4);
    }

    #[test]
    fn single_position_cache() {
        let cfg = small(1, 1);
        let inputs = DecodeInputs::random(&cfg, 9).unwrap();
        assert!(inputs.past_k.iter().all(Vec::is_empty));
        let table = fixed_table(&cfg, KernelChoice::ImplA).unwrap();
        let got = decode_step(&inputs, &params(&inputs, AttentionMode::Async), &table, 1).unwrap();
        let err = normwise_error(got.out.data(), decode_step_oracle(&inputs).unwrap().data());
        assert!(err <= 1e-4);
    }

    #[test]
    fn missing_shape_is_reported() {
        let cfg = small(1, 8);
        let inputs = DecodeInputs::random(&cfg, 1).unwrap();
        let mut table = fixed_table(&cfg, KernelChoice::ImplA).unwrap();
        table = {
            let mut t = DispatchTable::new(table.fingerprint.clone());
            for e in table.entries().filter(|e| (e.n, e.k) != (cfg.model.ffn, cfg.model.hidden)) {
                t.insert(*e);
            }
            t
        };
        let err = decode_step(&inputs, &params(&inputs, AttentionMode::Sync), &table, 1).unwrap_err();
        assert!(matches!(err, Error::UnknownShape { .. }), "{err:?}");
    }

    #[test]
    fn run_reports_every_op() {
        let cfg = small(2, 17);
        let inputs = DecodeInputs::random(&cfg, 5).unwrap();
        let table = fixed_table(&cfg, KernelChoice::ImplB).unwrap();
        let run = run_decode(&cfg, &params(&inputs, AttentionMode::Sync), &table, 1, 5).unwrap();
        assert!(run.passed(), "{}", run.error);
        let rep = run.report();
        assert!(rep.passed());
        let kinds: Vec<&str> = rep.records.iter().map(|r| r.kind()).collect();
        assert_eq!(kinds, ["decode_gemm", "decode_gemm", "decode_gemm", "decode_gemm", "decode_attention", "decode"]);
        assert_eq!(Report::parse(&rep.to_text()).unwrap(), rep);
    }

    #[test]
    fn inputs_are_seeded() {
        let cfg = small(2, 5);
        let a = DecodeInputs::random(&cfg, 3).unwrap();
        let b = DecodeInputs::random(&cfg, 3).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.past_v, b.past_v);
        assert_ne!(a.x, DecodeInputs::random(&cfg, 4).unwrap().x);
    }
}
