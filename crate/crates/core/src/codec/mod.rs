//! Frame and sequence coding.
//!
//! Every quantity that feeds a probability model or a recurrent cell is
//! rebuilt from decoded data, so the decoder tracks the encoder exactly:
//! each frame runs on a fresh tape whose inputs are the stored reference
//! reconstruction, the stored recurrent states and the decoded latents.

pub mod bitstream;
pub mod iframe;
pub mod video;

use crate::coder::{self, QuantizedCdf};
use crate::error::{shape_err, Error, Result};
use crate::layers::RecurrentState;
use crate::model::{CodecModel, Quantization, StepVars};
use crate::rae::{Latent, LatentKind, REDUCTION};
use crate::rpm::{cdfs_for, PmfVars, ALPHABET};
use crate::tensor::{Tape, Tensor};
use bitstream::{Bitstream, FrameRecord, GopMode, Header, FLAG_RGB, VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GopStructure {
    /// An I-frame every `gop_size` frames, P-frames coded forward.
    Uni { gop_size: usize },
    /// `n` P-frames forward from one I-frame, then `m` P-frames backward
    /// from the next one.
    Bi { n: usize, m: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    I,
    P,
}

/// One entry of the coding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodingStep {
    pub frame: usize,
    pub kind: FrameKind,
    /// Frame whose reconstruction is the reference of a P-frame.
    pub reference: Option<usize>,
}

impl GopStructure {
    pub fn gop_size(&self) -> usize {
        match *self {
            GopStructure::Uni { gop_size } => gop_size,
            GopStructure::Bi { n, m } => n + m + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GopStructure::Uni { gop_size } => (1..=256).contains(&gop_size),
            GopStructure::Bi { n, m } => n <= 255 && m <= 255,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("unsupported GOP structure {self:?}")))
        }
    }

    /// `(gop_mode, N, M)` header fields.
    pub fn header_fields(&self) -> (GopMode, u8, u8) {
        match *self {
            GopStructure::Uni { gop_size } => (GopMode::Uni, (gop_size - 1) as u8, 0),
            GopStructure::Bi { n, m } => (GopMode::Bi, n as u8, m as u8),
        }
    }

    pub fn from_header(h: &Header) -> Self {
        match h.gop_mode {
            GopMode::Uni => GopStructure::Uni {
                gop_size: h.n as usize + 1,
            },
            GopMode::Bi => GopStructure::Bi {
                n: h.n as usize,
                m: h.m as usize,
            },
        }
    }

    /// Coding order for `frames` frames.
    pub fn plan(&self, frames: usize) -> Vec<CodingStep> {
        let i = |frame| CodingStep {
            frame,
            kind: FrameKind::I,
            reference: None,
        };
        let p = |frame, r| CodingStep {
            frame,
            kind: FrameKind::P,
            reference: Some(r),
        };
        let mut out = Vec::with_capacity(frames);
        if frames == 0 {
            return out;
        }
        match *self {
            GopStructure::Uni { gop_size } => {
                for f in 0..frames {
                    out.push(if f % gop_size == 0 { i(f) } else { p(f, f - 1) });
                }
            }
            GopStructure::Bi { n, m } => {
                let period = n + m + 1;
                let mut a = 0;
                out.push(i(0));
                while a + 1 < frames {
                    let remaining = frames - 1 - a;
                    let fwd = n.min(remaining);
                    for f in a + 1..=a + fwd {
                        out.push(p(f, f - 1));
                    }
                    if remaining <= n {
                        break;
                    }
                    let b = (a + period).min(frames - 1);
                    out.push(i(b));
                    for f in (a + fwd + 1..b).rev() {
                        out.push(p(f, f + 1));
                    }
                    a = b;
                }
            }
        }
        out
    }
}

/// Per-sequence coding state. The decoder-visible part (reference,
/// decoder and probability-model states, previous latents) is covered by
/// [`CodecState::digest`].
#[derive(Clone, Debug, Default)]
pub struct CodecState {
    pub reference: Option<Tensor<f32>>,
    /// P-frames coded since the last reset by an I-frame.
    pub p_index: usize,
    pub enc_m: Option<RecurrentState<f32>>,
    pub enc_r: Option<RecurrentState<f32>>,
    pub dec_m: Option<RecurrentState<f32>>,
    pub dec_r: Option<RecurrentState<f32>>,
    pub rpm_m: Option<RecurrentState<f32>>,
    pub rpm_r: Option<RecurrentState<f32>>,
    pub prev_y_m: Option<Latent>,
    pub prev_y_r: Option<Latent>,
}

fn opt_digest(s: &Option<RecurrentState<f32>>) -> u64 {
    s.as_ref().map_or(0x9e37_79b9, RecurrentState::digest)
}

fn latent_digest(l: &Option<Latent>) -> u64 {
    l.as_ref().map_or(0x7f4a_7c15, |l| {
        l.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &v| (h ^ v as u32 as u64).wrapping_mul(0x100_0000_01b3))
    })
}

impl CodecState {
    /// Fresh state whose reference is an I-frame reconstruction.
    pub fn from_reference(reference: Tensor<f32>) -> Self {
        Self {
            reference: Some(reference),
            ..Self::default()
        }
    }

    /// Zero every recurrent cell; reference and previous latents are kept.
    pub fn reset_cells(&mut self) {
        self.enc_m = None;
        self.enc_r = None;
        self.dec_m = None;
        self.dec_r = None;
        self.rpm_m = None;
        self.rpm_r = None;
    }

    pub fn digest(&self) -> u64 {
        let parts = [
            self.reference.as_ref().map_or(1, Tensor::digest),
            self.p_index as u64,
            opt_digest(&self.dec_m),
            opt_digest(&self.dec_r),
            opt_digest(&self.rpm_m),
            opt_digest(&self.rpm_r),
            latent_digest(&self.prev_y_m),
            latent_digest(&self.prev_y_r),
        ];
        parts.iter().enumerate().fold(0u64, |h, (i, &p)| h ^ p.rotate_left(7 * i as u32).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn to_vars(&self, tape: &mut Tape<f32>) -> StepVars {
        let s = |tape: &mut Tape<f32>, r: &Option<RecurrentState<f32>>| r.as_ref().map(|r| r.to_tape(tape));
        let l = |tape: &mut Tape<f32>, y: &Option<Latent>| y.as_ref().map(|y| tape.constant(y.to_tensor()));
        StepVars {
            enc_m: s(tape, &self.enc_m),
            dec_m: s(tape, &self.dec_m),
            enc_r: s(tape, &self.enc_r),
            dec_r: s(tape, &self.dec_r),
            rpm_m: s(tape, &self.rpm_m),
            rpm_r: s(tape, &self.rpm_r),
            prev_y_m: l(tape, &self.prev_y_m),
            prev_y_r: l(tape, &self.prev_y_r),
        }
    }

    fn absorb(&mut self, tape: &Tape<f32>, st: &StepVars, y_m: Latent, y_r: Latent, recon: Tensor<f32>) {
        let s = |v: Option<crate::layers::LstmVars>| v.map(|v| RecurrentState::from_tape(tape, v));
        self.enc_m = s(st.enc_m);
        self.enc_r = s(st.enc_r);
        self.dec_m = s(st.dec_m);
        self.dec_r = s(st.dec_r);
        self.rpm_m = s(st.rpm_m);
        self.rpm_r = s(st.rpm_r);
        self.prev_y_m = Some(y_m);
        self.prev_y_r = Some(y_r);
        self.reference = Some(recon);
        self.p_index += 1;
    }
}

/// Output of coding one P-frame.
#[derive(Clone, Debug)]
pub struct PFrame {
    pub motion: Vec<u8>,
    pub residual: Vec<u8>,
    /// Ideal code length of each latent stream under the quantized tables.
    pub rate_bits_m: f64,
    pub rate_bits_r: f64,
    pub y_m: Latent,
    pub y_r: Latent,
    pub recon: Tensor<f32>,
}

impl PFrame {
    pub fn rate_bits(&self) -> f64 {
        self.rate_bits_m + self.rate_bits_r
    }

    pub fn chunk_bytes(&self) -> usize {
        self.motion.len() + self.residual.len()
    }
}

fn tables(tape: &Tape<f32>, pmf: &PmfVars) -> Vec<QuantizedCdf> {
    let (mu, s) = pmf.values(tape);
    cdfs_for(&mu, &s, ALPHABET)
}

/// Frame sides must be multiples of this: the latent reduction or the
/// coarsest flow level, whichever is larger.
pub fn frame_multiple(model: &CodecModel) -> usize {
    REDUCTION.max(1 << (model.config.flow_levels - 1))
}

pub fn check_frame_dims(model: &CodecModel, h: usize, w: usize) -> Result<()> {
    let div = frame_multiple(model);
    if h == 0 || w == 0 || !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        return shape_err("frame", format!("{h}x{w} must be a non-zero multiple of {div}; pad the input"));
    }
    Ok(())
}

pub fn latent_shape(model: &CodecModel, h: usize, w: usize) -> [usize; 4] {
    [1, model.config.latent_channels, h / REDUCTION, w / REDUCTION]
}

/// Code `frame` as a P-frame against `state.reference`.
pub fn encode_p(model: &CodecModel, state: &mut CodecState, frame: &Tensor<f32>, index: usize) -> Result<PFrame> {
    let reference = state.reference.as_ref().ok_or(Error::Config("P-frame without a reference".into()))?;
    if reference.shape() != frame.shape() {
        return shape_err("encode_p", format!("reference {:?} vs frame {:?}", reference.shape(), frame.shape()));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let r = tape.constant(reference.clone());
    let c = tape.constant(frame.clone());
    let mut st = state.to_vars(&mut tape);
    let fv = model.p_frame(&mut tape, &p, r, c, &mut st, Quantization::Round)?;
    let y_m = Latent::quantize(tape.value(fv.y_m), LatentKind::Motion, index)?;
    let y_r = Latent::quantize(tape.value(fv.y_r), LatentKind::Residual, index)?;
    let (tm, tr) = (tables(&tape, &fv.pmf_m), tables(&tape, &fv.pmf_r));
    let motion = coder::encode(&y_m.values, &tm)?;
    let residual = coder::encode(&y_r.values, &tr)?;
    let rate_bits_m = coder::ideal_bits(&y_m.values, &tm)?;
    let rate_bits_r = coder::ideal_bits(&y_r.values, &tr)?;
    let recon = tape.value(fv.f_hat).clone();
    state.absorb(&tape, &st, y_m.clone(), y_r.clone(), recon.clone());
    Ok(PFrame {
        motion,
        residual,
        rate_bits_m,
        rate_bits_r,
        y_m,
        y_r,
        recon,
    })
}

/// Decode a P-frame record against `state.reference`.
pub fn decode_p(model: &CodecModel, state: &mut CodecState, motion: &[u8], residual: &[u8], index: usize) -> Result<Tensor<f32>> {
    let reference = state.reference.as_ref().ok_or(Error::CorruptStream("P-frame without a reference"))?;
    let (_, _, h, w) = reference.dims4()?;
    let shape = latent_shape(model, h, w);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let r = tape.constant(reference.clone());
    let mut st = state.to_vars(&mut tape);

    let (pmf_m, s) = model.pmf(&mut tape, &p, LatentKind::Motion, st.prev_y_m, st.rpm_m, &shape)?;
    st.rpm_m = s;
    let y_m = Latent::new(shape, coder::decode(motion, &tables(&tape, &pmf_m))?, LatentKind::Motion, index)?;
    let (pmf_r, s) = model.pmf(&mut tape, &p, LatentKind::Residual, st.prev_y_r, st.rpm_r, &shape)?;
    st.rpm_r = s;
    let y_r = Latent::new(shape, coder::decode(residual, &tables(&tape, &pmf_r))?, LatentKind::Residual, index)?;

    let ym = tape.constant(y_m.to_tensor());
    let yr = tape.constant(y_r.to_tensor());
    let rec = model.reconstruct(&mut tape, &p, r, ym, yr, &mut st)?;
    let recon = tape.value(rec.f_hat).clone();
    state.absorb(&tape, &st, y_m, y_r, recon.clone());
    Ok(recon)
}

/// Per-frame accounting, in coding order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    pub kind: FrameKind,
    /// P-frames since the I-frame this frame depends on (0 for I-frames).
    pub p_index: usize,
    /// Bytes of the frame record in the container.
    pub record_bytes: usize,
    /// Bytes of the range-coded latent chunks (P-frames).
    pub chunk_bytes: usize,
    /// Ideal latent code length in bits (P-frames).
    pub rate_bits: f64,
    /// Decoder-visible state digest after this frame.
    pub digest: u64,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// Reconstructions in display order, at the coded (padded) size.
    pub recon: Vec<Tensor<f32>>,
    pub reports: Vec<FrameReport>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: Header,
    pub frames: Vec<Tensor<f32>>,
    /// State digest after each frame, in coding order.
    pub digests: Vec<u64>,
}

/// Encode a whole sequence. `crop` is the display size recorded in the
/// header (defaults to the coded size).
pub fn encode_video(model: &CodecModel, frames: &[Tensor<f32>], gop: GopStructure, crop: Option<(usize, usize)>) -> Result<Encoded> {
    gop.validate()?;
    let first = frames.first().ok_or_else(|| Error::Config("no frames to encode".into()))?;
    let (_, c, h, w) = first.dims4()?;
    check_frame_dims(model, h, w)?;
    if c != model.config.channels {
        return shape_err("encode_video", format!("{c} channels, model expects {}", model.config.channels));
    }
    if frames.iter().any(|f| f.shape() != first.shape()) {
        return shape_err("encode_video", "frames differ in shape".to_string());
    }
    let (crop_w, crop_h) = crop.unwrap_or((w, h));
    let (gop_mode, n, m) = gop.header_fields();
    let header = Header {
        version: VERSION,
        flags: if c == 3 { FLAG_RGB } else { 0 },
        width: w as u32,
        height: h as u32,
        crop_w: crop_w as u32,
        crop_h: crop_h as u32,
        frame_count: frames.len() as u32,
        gop_mode,
        n,
        m,
        lambda_id: model.config.lambda_id,
        model_hash: model.hash(),
    };
    let mut recon: Vec<Option<Tensor<f32>>> = vec![None; frames.len()];
    let mut records = Vec::with_capacity(frames.len());
    let mut reports = Vec::with_capacity(frames.len());
    let mut state = CodecState::default();
    let mut last = None;
    for step in gop.plan(frames.len()) {
        let f = step.frame;
        match step.kind {
            FrameKind::I => {
                let (payload, rec) = iframe::encode(&frames[f], model.config.iframe_levels)?;
                state = CodecState::from_reference(rec.clone());
                recon[f] = Some(rec);
                let record = FrameRecord::I { payload };
                reports.push(FrameReport {
                    frame: f,
                    kind: FrameKind::I,
                    p_index: 0,
                    record_bytes: record.encoded_len(),
                    chunk_bytes: 0,
                    rate_bits: 0.0,
                    digest: state.digest(),
                });
                records.push(record);
            }
            FrameKind::P => {
                let r = step.reference.expect("P-frame reference");
                if last != Some(r) {
                    state = CodecState::from_reference(recon[r].clone().expect("reference coded"));
                }
                let pf = encode_p(model, &mut state, &frames[f], f)?;
                let record = FrameRecord::P {
                    motion: pf.motion.clone(),
                    residual: pf.residual.clone(),
                };
                reports.push(FrameReport {
                    frame: f,
                    kind: FrameKind::P,
                    p_index: state.p_index,
                    record_bytes: record.encoded_len(),
                    chunk_bytes: pf.chunk_bytes(),
                    rate_bits: pf.rate_bits(),
                    digest: state.digest(),
                });
                records.push(record);
                recon[f] = Some(pf.recon);
            }
        }
        last = Some(f);
    }
    Ok(Encoded {
        bitstream: Bitstream { header, records },
        recon: recon.into_iter().map(|r| r.expect("every frame coded")).collect(),
        reports,
    })
}

pub fn decode_video(model: &CodecModel, bs: &Bitstream) -> Result<Decoded> {
    let h = &bs.header;
    let actual = model.hash();
    if h.model_hash != actual {
        return Err(Error::ModelHash {
            expected: h.model_hash,
            actual,
        });
    }
    let (ch, hh, ww) = (h.channels(), h.height as usize, h.width as usize);
    if ch != model.config.channels {
        return Err(Error::Format {
            what: "bitstream",
            detail: format!("{ch} channels, model expects {}", model.config.channels),
        });
    }
    check_frame_dims(model, hh, ww)?;
    let gop = GopStructure::from_header(h);
    let plan = gop.plan(h.frame_count as usize);
    if plan.len() != bs.records.len() {
        return Err(Error::CorruptStream("record count does not match the GOP plan"));
    }
    let shape = [1, ch, hh, ww];
    let mut frames: Vec<Option<Tensor<f32>>> = vec![None; plan.len()];
    let mut digests = Vec::with_capacity(plan.len());
    let mut state = CodecState::default();
    let mut last = None;
    for (step, rec) in plan.iter().zip(&bs.records) {
        let f = step.frame;
        let out = match (step.kind, rec) {
            (FrameKind::I, FrameRecord::I { payload }) => {
                let rec = iframe::decode(payload, &shape)?;
                state = CodecState::from_reference(rec.clone());
                rec
            }
            (FrameKind::P, FrameRecord::P { motion, residual }) => {
                let r = step.reference.expect("P-frame reference");
                if last != Some(r) {
                    state = CodecState::from_reference(frames[r].clone().expect("reference decoded"));
                }
                decode_p(model, &mut state, motion, residual, f)?
            }
            _ => return Err(Error::CorruptStream("frame type does not match the GOP plan")),
        };
        digests.push(state.digest());
        frames[f] = Some(out);
        last = Some(f);
    }
    Ok(Decoded {
        header: h.clone(),
        frames: frames.into_iter().map(|f| f.expect("every frame decoded")).collect(),
        digests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn kinds(plan: &[CodingStep]) -> String {
        plan.iter()
            .map(|s| match s.kind {
                FrameKind::I => format!("I{}", s.frame),
                FrameKind::P => format!("P{}", s.frame),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn uni_plan_places_i_frames_every_gop() {
        let plan = GopStructure::Uni { gop_size: 10 }.plan(20);
        let is: Vec<usize> = plan.iter().filter(|s| s.kind == FrameKind::I).map(|s| s.frame).collect();
        assert_eq!(is, vec![0, 10]);
        assert_eq!(plan.len(), 20);
        assert_eq!(GopStructure::Uni { gop_size: 10 }.plan(1).len(), 1);
    }

    #[test]
    fn bi_plan_codes_backward_from_the_next_i_frame() {
        let gop = GopStructure::Bi { n: 6, m: 6 };
        assert_eq!(gop.gop_size(), 13);
        assert_eq!(
            kinds(&gop.plan(14)),
            "I0 P1 P2 P3 P4 P5 P6 I13 P12 P11 P10 P9 P8 P7"
        );
        // a sequence one frame short of a full period ends on its I-frame
        assert_eq!(kinds(&gop.plan(13)), "I0 P1 P2 P3 P4 P5 P6 I12 P11 P10 P9 P8 P7");
        let plan = gop.plan(27);
        assert_eq!(plan.iter().filter(|s| s.kind == FrameKind::I).count(), 3);
        let mut seen: Vec<usize> = plan.iter().map(|s| s.frame).collect();
        seen.sort();
        assert_eq!(seen, (0..27).collect::<Vec<_>>());
        // every reference is coded before it is used
        for (k, s) in plan.iter().enumerate() {
            if let Some(r) = s.reference {
                assert!(plan[..k].iter().any(|q| q.frame == r));
            }
        }
        assert_eq!(kinds(&GopStructure::Bi { n: 2, m: 1 }.plan(3)), "I0 P1 P2");
    }

    #[test]
    fn single_frame_round_trip() {
        let model = CodecModel::new(ModelConfig::with_width(4), 1).unwrap();
        let f = Tensor::full(&[1, 1, 16, 16], 0.25f32);
        let enc = encode_video(&model, &[f], GopStructure::Uni { gop_size: 8 }, None).unwrap();
        let bytes = enc.bitstream.to_bytes();
        let dec = decode_video(&model, &Bitstream::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(dec.frames, enc.recon);
    }

    #[test]
    fn random_weights_close_the_loop() {
        let model = CodecModel::new(ModelConfig::with_width(4), 3).unwrap();
        let frames: Vec<_> = (0..5)
            .map(|t| {
                let v = (0..32 * 32).map(|i| ((i * 7 + t * 13) % 251) as f32 / 255.0).collect();
                Tensor::new(vec![1, 1, 32, 32], v).unwrap()
            })
            .collect();
        for gop in [GopStructure::Uni { gop_size: 4 }, GopStructure::Bi { n: 2, m: 1 }] {
            let enc = encode_video(&model, &frames, gop, None).unwrap();
            let dec = decode_video(&model, &Bitstream::from_bytes(&enc.bitstream.to_bytes()).unwrap()).unwrap();
            assert_eq!(dec.frames, enc.recon);
            let digests: Vec<u64> = enc.reports.iter().map(|r| r.digest).collect();
            assert_eq!(dec.digests, digests);
        }
    }

    #[test]
    fn wrong_model_is_rejected() {
        let model = CodecModel::new(ModelConfig::with_width(4), 1).unwrap();
        let other = CodecModel::new(ModelConfig::with_width(4), 2).unwrap();
        let f = Tensor::full(&[1, 1, 16, 16], 0.25f32);
        let enc = encode_video(&model, &[f.clone(), f], GopStructure::Uni { gop_size: 8 }, None).unwrap();
        assert!(matches!(decode_video(&other, &enc.bitstream), Err(Error::ModelHash { .. })));
    }

    #[test]
    fn indivisible_frames_are_rejected() {
        let model = CodecModel::new(ModelConfig::with_width(4), 1).unwrap();
        let f = Tensor::full(&[1, 1, 24, 16], 0.25f32);
        assert!(encode_video(&model, &[f], GopStructure::Uni { gop_size: 8 }, None).is_err());
    }
}
