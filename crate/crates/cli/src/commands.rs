use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;

use rnvc::codec::bitstream::{Bitstream, FrameRecord, GopMode, HEADER_LEN};
use rnvc::codec::video::{crop_frame, pad_frame, RawVideo};
use rnvc::codec::{self, FrameKind, GopStructure};
use rnvc::metrics::{msssim, psnr, write_rd_csv, RdRow};
use rnvc::model::{sidecar_path, CheckpointMeta, CodecModel};
use rnvc::tensor::Tensor;
use rnvc::train::harness::{
    error_propagation, evaluate_sequence, run_ablation, summarize, write_frames_csv, write_propagation_csv, AblationConfig,
    FrameEval, ProbePoint, Summary, VariantRun,
};
use rnvc::train::{completed_stages, write_log_csv, Stage, StageReport, SyntheticDataset, TrainConfig, Trainer};

use crate::args::{AblateArgs, Command, DecodeArgs, EncodeArgs, ErrpropArgs, EvalArgs, InspectArgs, SourceArgs, TrainArgs};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Errprop(a) => errprop(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn load_model(path: &Path) -> Result<(CodecModel, CheckpointMeta)> {
    require(path, "checkpoint")?;
    require(&sidecar_path(path), "checkpoint metadata")?;
    Ok(CodecModel::load(path)?)
}

fn read_video(path: &Path) -> Result<RawVideo> {
    require(path, "input video")?;
    require(&codec::video::sidecar_path(path), "video sidecar")?;
    Ok(RawVideo::read(path)?)
}

/// Frames padded to what the model accepts, plus the original size.
fn padded_frames(model: &CodecModel, video: &RawVideo) -> Result<(Vec<Tensor<f32>>, (usize, usize))> {
    if video.info.channels != model.config.channels {
        return Err(CliError::Usage(format!(
            "video has {} channels, the model codes {}",
            video.info.channels, model.config.channels
        )));
    }
    if video.info.frames == 0 {
        return Err(CliError::Usage("video has no frames".into()));
    }
    let multiple = codec::frame_multiple(model);
    let frames = video
        .to_tensors()
        .iter()
        .map(|f| pad_frame(f, multiple))
        .collect::<rnvc::Result<Vec<_>>>()?;
    Ok((frames, (video.info.width, video.info.height)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn train(a: TrainArgs) -> Result<()> {
    let stages = a.stages()?;
    let (model, completed) = match &a.init {
        Some(p) => {
            let (m, meta) = load_model(p)?;
            let done = completed_stages(&meta)?;
            (m, done)
        }
        None => (CodecModel::new(a.model.config()?, a.schedule.seed)?, Vec::new()),
    };
    let data = a.data.config(model.config.channels)?;
    let cfg = TrainConfig {
        stages,
        from_scratch: a.from_scratch,
        ..a.schedule.config(data)
    };
    cfg.validate(&model).map_err(|e| CliError::Usage(e.to_string()))?;
    // refuse a stage order the trainer would reject only after hours of work
    let mut seen = completed.clone();
    for s in &cfg.stages {
        if let Some(prev) = s.previous() {
            if !cfg.from_scratch && !seen.contains(&prev) {
                return Err(CliError::Usage(format!(
                    "stage {} needs a checkpoint that completed {} (pass --init or --from-scratch)",
                    s.label(),
                    prev.label()
                )));
            }
        }
        seen.push(*s);
    }
    let mut t = Trainer::new(model, cfg, completed)?;
    let reports = t.run();
    if let Some(p) = &a.log {
        write_log_csv(create(p)?, &t.log)?;
    }
    let reports = reports?;
    t.save(&a.out)?;
    for r in &reports {
        println!(
            "{:<4} steps {:>5} converged {:<5} loss {:.5} rate {:.4} bpp distortion {:.6}",
            r.stage.label(),
            r.steps,
            r.converged,
            r.final_loss,
            r.final_rate_bpp,
            r.final_distortion
        );
    }
    println!("saved {}", a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct FrameStats {
    frame: usize,
    kind: &'static str,
    p_index: usize,
    bits: u64,
    rate_bits: f64,
    psnr: f64,
    /// `None` when the frame is too small for a single MS-SSIM scale.
    msssim: Option<f64>,
    digest: String,
}

/// Encoder statistics. `total_bits` is exactly eight times the size of
/// the bitstream file.
#[derive(Debug, Serialize)]
struct EncodeStats {
    input: PathBuf,
    output: PathBuf,
    width: usize,
    height: usize,
    coded_width: usize,
    coded_height: usize,
    frames: usize,
    gop: String,
    header_bits: u64,
    total_bits: u64,
    bpp: f64,
    mean_psnr: f64,
    mean_msssim: Option<f64>,
    /// Coding order.
    per_frame: Vec<FrameStats>,
}

fn gop_label(g: GopStructure) -> String {
    match g {
        GopStructure::Uni { gop_size } => format!("uni:{gop_size}"),
        GopStructure::Bi { n, m } => format!("bi:{n}:{m}"),
    }
}

fn encode(a: EncodeArgs) -> Result<()> {
    let gop = a.gop.structure()?;
    let (model, _) = load_model(&a.model)?;
    let video = read_video(&a.input)?;
    let (frames, (w, h)) = padded_frames(&model, &video)?;
    let (_, _, ch, cw) = frames[0].dims4()?;
    let source = video.to_tensors();
    let enc = codec::encode_video(&model, &frames, gop, Some((w, h)))?;
    let bytes = enc.bitstream.to_bytes();
    let mut per_frame = Vec::with_capacity(enc.reports.len());
    let mut cropped = Vec::with_capacity(enc.recon.len());
    for rec in &enc.recon {
        cropped.push(crop_frame(rec, h, w)?);
    }
    for r in &enc.reports {
        let (src, rec) = (&source[r.frame], &cropped[r.frame]);
        per_frame.push(FrameStats {
            frame: r.frame,
            kind: if r.kind == FrameKind::I { "I" } else { "P" },
            p_index: r.p_index,
            bits: r.record_bytes as u64 * 8,
            rate_bits: r.rate_bits,
            psnr: psnr(src, rec, 1.0)?,
            msssim: msssim(src, rec).ok(),
            digest: format!("{:016x}", r.digest),
        });
    }
    let header_bits = HEADER_LEN as u64 * 8;
    let total_bits = header_bits + per_frame.iter().map(|f| f.bits).sum::<u64>();
    if total_bits != bytes.len() as u64 * 8 {
        return Err(CliError::Runtime(rnvc::Error::Format {
            what: "stats",
            detail: format!("frame bits add up to {total_bits}, bitstream has {} bits", bytes.len() * 8),
        }));
    }
    fs::write(&a.output, &bytes)?;
    let on_disk = fs::metadata(&a.output)?.len() * 8;
    if on_disk != total_bits {
        return Err(CliError::Runtime(rnvc::Error::Format {
            what: "stats",
            detail: format!("wrote {on_disk} bits, expected {total_bits}"),
        }));
    }
    let n = per_frame.len() as f64;
    let ms: Option<Vec<f64>> = per_frame.iter().map(|f| f.msssim).collect();
    let stats = EncodeStats {
        input: a.input.clone(),
        output: a.output.clone(),
        width: w,
        height: h,
        coded_width: cw,
        coded_height: ch,
        frames: per_frame.len(),
        gop: gop_label(gop),
        header_bits,
        total_bits,
        bpp: total_bits as f64 / (w * h * per_frame.len()) as f64,
        mean_psnr: per_frame.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_msssim: ms.map(|v| v.iter().sum::<f64>() / n),
        per_frame,
    };
    let stats_path = a.stats.clone().unwrap_or_else(|| {
        let mut s = a.output.as_os_str().to_owned();
        s.push(".stats.json");
        PathBuf::from(s)
    });
    write_json(&stats_path, &stats)?;
    if let Some(p) = &a.recon {
        RawVideo::from_tensors(&cropped)?.write(p)?;
    }
    println!(
        "{} frames, {} bytes, {:.4} bpp, {:.2} dB",
        stats.frames,
        bytes.len(),
        stats.bpp,
        stats.mean_psnr
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    require(&a.input, "bitstream")?;
    let bs = Bitstream::from_bytes(&fs::read(&a.input)?)?;
    let dec = codec::decode_video(&model, &bs)?;
    let (w, h) = (dec.header.crop_w as usize, dec.header.crop_h as usize);
    let frames = dec
        .frames
        .iter()
        .map(|f| crop_frame(f, h, w))
        .collect::<rnvc::Result<Vec<_>>>()?;
    RawVideo::from_tensors(&frames)?.write(&a.output)?;
    println!("{} frames, {w}x{h}", frames.len());
    Ok(())
}

/// Sequences to code: the padded raw video, or synthetic ones of
/// `synthetic_len` frames.
fn sequences(model: &CodecModel, src: &SourceArgs, synthetic_len: usize) -> Result<Vec<Vec<Tensor<f32>>>> {
    if let Some(p) = &src.input {
        let video = read_video(p)?;
        return Ok(vec![padded_frames(model, &video)?.0]);
    }
    if src.sequences == 0 {
        return Err(CliError::Usage("--sequences must be positive".into()));
    }
    let data = rnvc::train::DataConfig {
        seq_len: synthetic_len,
        ..src.data.config(model.config.channels)?
    };
    codec::check_frame_dims(model, data.size, data.size).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut ds = SyntheticDataset::new(data, src.data_seed)?;
    Ok((0..src.sequences).map(|_| ds.sequence()).collect())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    sequences: usize,
    frames: usize,
    gop: String,
    file_bytes: usize,
    summary: Summary,
}

fn eval(a: EvalArgs) -> Result<()> {
    let gop = a.gop.structure()?;
    let (model, _) = load_model(&a.model)?;
    let seqs = sequences(&model, &a.source, a.source.data.seq_len)?;
    let (_, _, h, w) = seqs[0][0].dims4()?;
    let mut rows: Vec<FrameEval> = Vec::new();
    let mut file_bytes = 0;
    for s in &seqs {
        let (r, n) = evaluate_sequence(&model, s, gop)?;
        rows.extend(r);
        file_bytes += n;
    }
    let summary = summarize(&rows, (h * w) as f64);
    if let Some(p) = &a.frames_csv {
        write_frames_csv(create(p)?, &rows)?;
    }
    if let Some(p) = &a.rd_csv {
        let row = RdRow {
            label: a.label.clone(),
            lambda_id: model.config.lambda_id,
            bpp: summary.bpp,
            psnr: summary.psnr,
            msssim: summary.msssim,
        };
        write_rd_csv(create(p)?, &[row])?;
    }
    let report = EvalReport {
        sequences: seqs.len(),
        frames: rows.len(),
        gop: gop_label(gop),
        file_bytes,
        summary,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct VariantSummary {
    variant: &'static str,
    checkpoint: PathBuf,
    final_loss: f64,
    /// Full-stage objective on the held-out sequences.
    held_out_loss: f64,
    stages: Vec<StageReport>,
    eval: Summary,
}

#[derive(Debug, Serialize)]
struct AblationJson {
    variants: Vec<VariantSummary>,
    /// Full model at the probe frame without and with the state reset.
    probe_frame: usize,
    probe_unreset: ProbePoint,
    probe_reset: ProbePoint,
}

fn file_stem(run: &VariantRun) -> &'static str {
    match run.variant {
        rnvc::model::Variant::Bl => "bl",
        rnvc::model::Variant::BlRae => "bl-rae",
        rnvc::model::Variant::Full => "full",
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let model = a.model.config()?;
    let data = a.data.config(model.channels)?;
    let train = TrainConfig {
        stages: Stage::ALL.to_vec(),
        ..a.schedule.config(data)
    };
    let rpm = TrainConfig {
        batch: a.rpm_batch,
        lr: a.rpm_lr,
        max_steps: a.rpm_steps,
        min_steps: a.schedule.min_steps.min(a.rpm_steps),
        ..train.clone()
    };
    if a.rpm_steps == 0 || a.eval_sequences == 0 {
        return Err(CliError::Usage("--rpm-steps and --eval-sequences must be positive".into()));
    }
    let probe = CodecModel::new(model.clone(), 0)?;
    train.validate(&probe).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = AblationConfig {
        model,
        train,
        rpm,
        eval_sequences: a.eval_sequences,
        eval_len: a.eval_len,
        eval_seed: a.eval_seed,
        gop: GopStructure::Uni { gop_size: a.eval_len },
        probe_frame: a.probe_frame,
    };
    if cfg.probe_frame < 2 || cfg.eval_len <= cfg.probe_frame {
        return Err(CliError::Usage(format!(
            "--probe-frame must be at least 2 and below --eval-len ({})",
            cfg.eval_len
        )));
    }
    let report = run_ablation(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut variants = Vec::new();
    for ((run, s), &held_out_loss) in report.runs.iter().zip(&report.summaries).zip(&report.losses) {
        let stem = file_stem(run);
        let ckpt = a.out_dir.join(format!("{stem}.ckpt"));
        let meta = CheckpointMeta {
            model: run.model.config.clone(),
            stages_completed: Stage::ALL.iter().map(|s| s.label().to_string()).collect(),
            train: Some(serde_json::to_value(&cfg.train)?),
        };
        run.model.save(&ckpt, &meta)?;
        write_log_csv(create(&a.out_dir.join(format!("{stem}.log.csv")))?, &run.log)?;
        variants.push(VariantSummary {
            variant: run.variant.label(),
            checkpoint: ckpt,
            final_loss: run.final_loss(),
            held_out_loss,
            stages: run.reports.clone(),
            eval: s.clone(),
        });
    }
    write_rd_csv(create(&a.out_dir.join("rd.csv"))?, &report.rd)?;
    let json = AblationJson {
        variants,
        probe_frame: cfg.probe_frame,
        probe_unreset: report.probe.0,
        probe_reset: report.probe.1,
    };
    write_json(&a.out_dir.join("report.json"), &json)?;
    println!("{:<11} {:>10} {:>9} {:>9} {:>9} {:>8}", "variant", "final loss", "held-out", "P bpp", "bpp", "PSNR");
    for v in &json.variants {
        println!(
            "{:<11} {:>10.4} {:>9.4} {:>9.4} {:>9.4} {:>8.2}",
            v.variant, v.final_loss, v.held_out_loss, v.eval.p_chunk_bpp, v.eval.bpp, v.eval.psnr
        );
    }
    println!(
        "probe P{}: unreset {:.4} bpp {:.2} dB, reset {:.4} bpp {:.2} dB",
        cfg.probe_frame, json.probe_unreset.bpp, json.probe_unreset.psnr, json.probe_reset.bpp, json.probe_reset.psnr
    );
    Ok(())
}

fn errprop(a: ErrpropArgs) -> Result<()> {
    if a.gop_size < 13 {
        return Err(CliError::Usage(format!("--gop-size must be at least 13, got {}", a.gop_size)));
    }
    let gop = GopStructure::Uni { gop_size: a.gop_size };
    let (model, _) = load_model(&a.model)?;
    // synthetic sequences are exactly one GOP long
    let seqs = sequences(&model, &a.source, a.gop_size)?;
    if seqs.iter().any(|s| s.len() < a.gop_size) {
        return Err(CliError::Usage(format!("the input is shorter than one GOP of {} frames", a.gop_size)));
    }
    let rows = error_propagation(&model, &seqs, gop)?;
    match &a.out {
        Some(p) => write_propagation_csv(create(p)?, &rows)?,
        None => write_propagation_csv(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    require(&a.input, "bitstream")?;
    let bs = Bitstream::from_bytes(&fs::read(&a.input)?)?;
    let h = &bs.header;
    let gop = GopStructure::from_header(h);
    let plan = gop.plan(h.frame_count as usize);
    let records: Vec<serde_json::Value> = bs
        .records
        .iter()
        .zip(&plan)
        .map(|(r, step)| match r {
            FrameRecord::I { payload } => serde_json::json!({
                "frame": step.frame, "type": "I", "bytes": r.encoded_len(), "payload_bytes": payload.len(),
            }),
            FrameRecord::P { motion, residual } => serde_json::json!({
                "frame": step.frame, "type": "P", "bytes": r.encoded_len(), "reference": step.reference,
                "motion_bytes": motion.len(), "residual_bytes": residual.len(),
            }),
        })
        .collect();
    let out = serde_json::json!({
        "version": h.version,
        "flags": h.flags,
        "width": h.width,
        "height": h.height,
        "crop_w": h.crop_w,
        "crop_h": h.crop_h,
        "frame_count": h.frame_count,
        "gop_mode": match h.gop_mode { GopMode::Uni => "uni", GopMode::Bi => "bi" },
        "n": h.n,
        "m": h.m,
        "gop_size": gop.gop_size(),
        "lambda_id": h.lambda_id,
        "model_hash": format!("{:016x}", h.model_hash),
        "total_bytes": bs.len(),
        "records": records,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
