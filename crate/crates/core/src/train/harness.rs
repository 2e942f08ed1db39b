//! Evaluation drivers shared by the command line and the acceptance runs:
//! per-frame coding statistics, the error-propagation profile, the
//! recurrent-state reset probe and the variant ablation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, encode_p, iframe, CodecState, FrameKind, GopStructure};
use crate::error::{Error, Result};
use crate::metrics::{csv_err, msssim, psnr, RdRow};
use crate::model::{CodecModel, ModelConfig, Variant};
use crate::tensor::{Tape, Tensor};

use super::{Stage, StageReport, TrainConfig, Trainer};

/// Coding statistics of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    pub kind: String,
    pub p_index: usize,
    /// Bits of the frame record in the container.
    pub bits: f64,
    /// Bits of the range-coded latent chunks, without record framing
    /// (P-frames).
    pub chunk_bits: f64,
    /// Ideal latent code length (P-frames).
    pub rate_bits: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

/// Encode `frames` and measure every frame against its source, in coding
/// order. Returns the per-frame rows and the container size in bytes.
pub fn evaluate_sequence(model: &CodecModel, frames: &[Tensor<f32>], gop: GopStructure) -> Result<(Vec<FrameEval>, usize)> {
    let enc = codec::encode_video(model, frames, gop, None)?;
    let (_, _, h, w) = frames[0].dims4()?;
    let pixels = (h * w) as f64;
    let rows = enc
        .reports
        .iter()
        .map(|r| {
            let (src, rec) = (&frames[r.frame], &enc.recon[r.frame]);
            let bits = r.record_bytes as f64 * 8.0;
            Ok(FrameEval {
                frame: r.frame,
                kind: if r.kind == FrameKind::I { "I" } else { "P" }.into(),
                p_index: r.p_index,
                bits,
                chunk_bits: r.chunk_bytes as f64 * 8.0,
                rate_bits: r.rate_bits,
                bpp: bits / pixels,
                psnr: psnr(src, rec, 1.0)?,
                msssim: msssim(src, rec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, enc.bitstream.len()))
}

pub fn write_frames_csv<W: std::io::Write>(out: W, rows: &[FrameEval]) -> Result<()> {
    write_csv(out, rows)
}

fn write_csv<W: std::io::Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Means over P-frames and over all frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Container bits of P-frame records per pixel.
    pub p_bpp: f64,
    /// Range-coded latent bits per pixel, without record framing.
    pub p_chunk_bpp: f64,
    /// Ideal latent code length per pixel.
    pub p_ideal_bpp: f64,
    pub p_psnr: f64,
    pub p_msssim: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

/// Means over `rows`; per-pixel figures need the frame area.
pub fn summarize(rows: &[FrameEval], pixels: f64) -> Summary {
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let p = || rows.iter().filter(|r| r.kind == "P");
    Summary {
        p_bpp: mean(&mut p().map(|r| r.bpp)),
        p_chunk_bpp: mean(&mut p().map(|r| r.chunk_bits / pixels)),
        p_ideal_bpp: mean(&mut p().map(|r| r.rate_bits / pixels)),
        p_psnr: mean(&mut p().map(|r| r.psnr)),
        p_msssim: mean(&mut p().map(|r| r.msssim)),
        bpp: mean(&mut rows.iter().map(|r| r.bpp)),
        psnr: mean(&mut rows.iter().map(|r| r.psnr)),
        msssim: mean(&mut rows.iter().map(|r| r.msssim)),
    }
}

/// Mean (bpp, PSNR) per P-frame index over every GOP of every sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationRow {
    pub p_index: usize,
    pub count: usize,
    pub bpp: f64,
    pub psnr: f64,
}

pub fn error_propagation(model: &CodecModel, sequences: &[Vec<Tensor<f32>>], gop: GopStructure) -> Result<Vec<PropagationRow>> {
    let mut acc: Vec<(usize, f64, f64)> = Vec::new();
    for seq in sequences {
        let (rows, _) = evaluate_sequence(model, seq, gop)?;
        for r in rows.iter().filter(|r| r.kind == "P") {
            if acc.len() < r.p_index {
                acc.resize(r.p_index, (0, 0.0, 0.0));
            }
            let a = &mut acc[r.p_index - 1];
            *a = (a.0 + 1, a.1 + r.bpp, a.2 + r.psnr);
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.0 > 0)
        .map(|(i, (n, b, p))| PropagationRow {
            p_index: i + 1,
            count: n,
            bpp: b / n as f64,
            psnr: p / n as f64,
        })
        .collect())
}

pub fn write_propagation_csv<W: std::io::Write>(out: W, rows: &[PropagationRow]) -> Result<()> {
    write_csv(out, rows)
}

/// Rate and quality of one P-frame in the reset probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    /// Ideal latent code length per pixel.
    pub bpp: f64,
    /// Actual range-coded bytes per pixel.
    pub coded_bpp: f64,
    pub psnr: f64,
}

/// Code `frames[0]` as an I-frame and `frames[1..=probe]` as P-frames,
/// returning the P-frame `probe` point. With `reset_before = Some(k)`, every
/// recurrent cell is zeroed just before P-frame `k`, so frames from `k` on
/// only see the latents of the frame before them.
pub fn reset_probe(model: &CodecModel, frames: &[Tensor<f32>], probe: usize, reset_before: Option<usize>) -> Result<ProbePoint> {
    if frames.len() <= probe || probe == 0 {
        return Err(Error::Config(format!("probe frame {probe} needs at least {} frames", probe + 1)));
    }
    let (_, _, h, w) = frames[0].dims4()?;
    let pixels = (h * w) as f64;
    let (_, rec) = iframe::encode(&frames[0], model.config.iframe_levels)?;
    let mut state = CodecState::from_reference(rec);
    for (t, f) in frames.iter().enumerate().take(probe + 1).skip(1) {
        if reset_before == Some(t) {
            state.reset_cells();
        }
        let pf = encode_p(model, &mut state, f, t)?;
        if t == probe {
            return Ok(ProbePoint {
                bpp: pf.rate_bits() / pixels,
                coded_bpp: pf.chunk_bytes() as f64 * 8.0 / pixels,
                psnr: psnr(f, &pf.recon, 1.0)?,
            });
        }
    }
    unreachable!("loop returns at the probe frame")
}

/// Average of [`reset_probe`] over several sequences.
pub fn mean_probe(model: &CodecModel, sequences: &[Vec<Tensor<f32>>], probe: usize, reset_before: Option<usize>) -> Result<ProbePoint> {
    let pts = sequences
        .iter()
        .map(|s| reset_probe(model, s, probe, reset_before))
        .collect::<Result<Vec<_>>>()?;
    let n = pts.len().max(1) as f64;
    Ok(ProbePoint {
        bpp: pts.iter().map(|p| p.bpp).sum::<f64>() / n,
        coded_bpp: pts.iter().map(|p| p.coded_bpp).sum::<f64>() / n,
        psnr: pts.iter().map(|p| p.psnr).sum::<f64>() / n,
    })
}

/// Outcome of training one ablation variant.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub model: CodecModel,
    pub reports: Vec<StageReport>,
    pub log: Vec<super::LogRow>,
}

impl VariantRun {
    /// Mean loss over the last window of the final stage.
    pub fn final_loss(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.final_loss)
    }
}

/// Train one variant from scratch through every stage of `cfg`.
pub fn train_variant(base: &ModelConfig, variant: Variant, cfg: &TrainConfig) -> Result<VariantRun> {
    let model = CodecModel::new(base.clone().with_variant(variant), cfg.seed)?;
    let mut t = Trainer::new(model, cfg.clone(), Vec::new())?;
    let reports = t.run()?;
    Ok(VariantRun {
        variant,
        model: t.model,
        reports,
        log: t.log,
    })
}

/// Turn a trained BL+RAE model into the full model by switching on the
/// recurrent probability model and training only its parameters on the
/// unrolled sequence loss. Reconstructions do not change, so any rate
/// difference is due to the entropy model alone.
pub fn add_rpm(model: &CodecModel, cfg: &TrainConfig) -> Result<VariantRun> {
    let mut m = model.clone();
    m.config.use_rpm = true;
    let mut cfg = cfg.clone();
    cfg.stages = vec![Stage::Full];
    cfg.trainable = Some(vec!["rpm_m.".into(), "rpm_r.".into()]);
    cfg.from_scratch = true;
    let mut t = Trainer::new(m, cfg, vec![Stage::Me, Stage::Mc, Stage::P1])?;
    let reports = t.run()?;
    Ok(VariantRun {
        variant: Variant::Full,
        model: t.model,
        reports,
        log: t.log,
    })
}

/// Evaluate `model` on `sequences` and average the frame statistics.
pub fn evaluate_set(model: &CodecModel, sequences: &[Vec<Tensor<f32>>], gop: GopStructure) -> Result<Summary> {
    let first = sequences.first().and_then(|s| s.first()).ok_or_else(|| Error::Config("no sequences to evaluate".into()))?;
    let (_, _, h, w) = first.dims4()?;
    let mut all = Vec::new();
    for s in sequences {
        all.extend(evaluate_sequence(model, s, gop)?.0);
    }
    Ok(summarize(&all, (h * w) as f64))
}

/// Mean full-stage objective (`lambda * D + R`, noise-relaxed latents) over
/// the first `len` frames of fixed sequences, the first coded as an
/// I-frame. Unlike the mean of the training log it does not depend on which
/// batches a run happened to draw last.
pub fn sequence_loss(model: &CodecModel, sequences: &[Vec<Tensor<f32>>], len: usize, seed: u64) -> Result<f64> {
    if sequences.is_empty() || len < 2 || sequences.iter().any(|s| s.len() < len) {
        return Err(Error::Config(format!("sequence loss needs sequences of at least {len} >= 2 frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in sequences {
        let mut frames = s[..len].to_vec();
        frames[0] = iframe::encode(&frames[0], model.config.iframe_levels)?.1;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let (l, _, _) = super::stage_loss(model, &mut tape, &p, Stage::Full, &frames, &mut rng)?;
        total += tape.value(l).item() as f64;
    }
    Ok(total / sequences.len() as f64)
}

/// The three-variant ablation: BL and BL+RAE trained from scratch on the
/// same data and seed, then the full model obtained from BL+RAE with
/// [`add_rpm`].
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Schedule of the recurrent probability model (its `stages` and
    /// `trainable` fields are overridden).
    pub rpm: TrainConfig,
    /// Held-out sequences: count, length and generator seed. They are drawn
    /// with the training data configuration.
    pub eval_sequences: usize,
    pub eval_len: usize,
    pub eval_seed: u64,
    pub gop: GopStructure,
    /// P-frame probed with and without a state reset one frame earlier.
    pub probe_frame: usize,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    /// BL, BL+RAE, full.
    pub runs: Vec<VariantRun>,
    pub summaries: Vec<Summary>,
    /// [`sequence_loss`] of each run on the held-out sequences, over the
    /// training sequence length.
    pub losses: Vec<f64>,
    pub rd: Vec<RdRow>,
    /// Full model at `probe_frame`: unreset, then reset one frame before.
    pub probe: (ProbePoint, ProbePoint),
}

pub fn held_out(cfg: &AblationConfig) -> Result<Vec<Vec<Tensor<f32>>>> {
    let data = super::DataConfig {
        seq_len: cfg.eval_len,
        ..cfg.train.data.clone()
    };
    let mut ds = super::SyntheticDataset::new(data, cfg.eval_seed)?;
    Ok((0..cfg.eval_sequences).map(|_| ds.sequence()).collect())
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    if cfg.probe_frame < 2 || cfg.eval_len <= cfg.probe_frame {
        return Err(Error::Config(format!(
            "probe frame {} needs 2 <= probe < eval length {}",
            cfg.probe_frame, cfg.eval_len
        )));
    }
    let seqs = held_out(cfg)?;
    let bl = train_variant(&cfg.model, Variant::Bl, &cfg.train)?;
    let rae = train_variant(&cfg.model, Variant::BlRae, &cfg.train)?;
    let full = add_rpm(&rae.model, &cfg.rpm)?;
    let runs = vec![bl, rae, full];
    let mut summaries = Vec::new();
    let mut losses = Vec::new();
    let mut rd = Vec::new();
    let len = cfg.train.data.seq_len.min(cfg.eval_len);
    for r in &runs {
        losses.push(sequence_loss(&r.model, &seqs, len, cfg.eval_seed)?);
        let s = evaluate_set(&r.model, &seqs, cfg.gop)?;
        rd.push(RdRow {
            label: r.variant.label().into(),
            lambda_id: r.model.config.lambda_id,
            bpp: s.bpp,
            psnr: s.psnr,
            msssim: s.msssim,
        });
        summaries.push(s);
    }
    let m = &runs[2].model;
    let probe = (
        mean_probe(m, &seqs, cfg.probe_frame, None)?,
        mean_probe(m, &seqs, cfg.probe_frame, Some(cfg.probe_frame - 1))?,
    );
    Ok(AblationReport {
        runs,
        summaries,
        losses,
        rd,
        probe,
    })
}

/// RD row of a model evaluated on `sequences`.
pub fn rd_row(label: &str, model: &CodecModel, sequences: &[Vec<Tensor<f32>>], gop: GopStructure) -> Result<RdRow> {
    let m = evaluate_set(model, sequences, gop)?;
    Ok(RdRow {
        label: label.into(),
        lambda_id: model.config.lambda_id,
        bpp: m.bpp,
        psnr: m.psnr,
        msssim: m.msssim,
    })
}
