//! Stored-quantized I-frames.
//!
//! Pixels are taken as 8-bit codes `k`, mapped to `q` uniform levels
//! `k * q / 256`, and range coded with adaptive per-channel counts. When the
//! adaptive model would cost more than coding every level uniformly, the
//! uniform mode is used instead, so the payload never exceeds
//! `H * W * C * log2(q) / 8` plus a few bytes. Payload: mode `u8`, `q - 1`
//! as `u8`, then the coded levels.

use crate::coder::{AdaptiveModel, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MODE_ADAPTIVE: u8 = 0;
const MODE_UNIFORM: u8 = 1;
const INCREMENT: u32 = 32;

pub fn to_code(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn level_of(code: u8, q: u32) -> u32 {
    code as u32 * q / 256
}

/// Centre of a level's code interval, as a unit-range value.
fn value_of(level: u32, q: u32) -> f32 {
    let code = ((level as f64 + 0.5) * 256.0 / q as f64 - 0.5).clamp(0.0, 255.0);
    code as f32 / 255.0
}

fn code_levels(levels: &[u32], planes: usize, q: u32, adaptive: bool) -> Result<Vec<u8>> {
    let plane = levels.len() / planes.max(1);
    let mut enc = RangeEncoder::new();
    for c in 0..planes {
        let mut m = AdaptiveModel::new(0, q as usize, if adaptive { INCREMENT } else { 0 });
        for &l in &levels[c * plane..(c + 1) * plane] {
            enc.encode(&m, l as i32)?;
            m.update(l as i32);
        }
    }
    Ok(enc.finish())
}

/// Encode a `1 x C x H x W` unit-range frame; returns the payload and the
/// reconstruction the decoder will produce.
pub fn encode(frame: &Tensor<f32>, q: u16) -> Result<(Vec<u8>, Tensor<f32>)> {
    let (n, c, _, _) = frame.dims4()?;
    if n != 1 {
        return Err(Error::Config(format!("I-frame batch must be 1, got {n}")));
    }
    if !(2..=256).contains(&q) {
        return Err(Error::Config(format!("I-frame levels must be in 2..=256, got {q}")));
    }
    let q = q as u32;
    let levels: Vec<u32> = frame.data().iter().map(|&v| level_of(to_code(v), q)).collect();
    let adaptive = code_levels(&levels, c, q, true)?;
    let uniform = code_levels(&levels, c, q, false)?;
    let (mode, body) = if adaptive.len() <= uniform.len() {
        (MODE_ADAPTIVE, adaptive)
    } else {
        (MODE_UNIFORM, uniform)
    };
    let mut payload = vec![mode, (q - 1) as u8];
    payload.extend_from_slice(&body);
    let recon = levels.iter().map(|&l| value_of(l, q)).collect();
    Ok((payload, Tensor::new(frame.shape().to_vec(), recon)?))
}

pub fn decode(payload: &[u8], shape: &[usize]) -> Result<Tensor<f32>> {
    if payload.len() < 2 {
        return Err(Error::CorruptStream("I-frame payload too short"));
    }
    let adaptive = match payload[0] {
        MODE_ADAPTIVE => true,
        MODE_UNIFORM => false,
        _ => return Err(Error::CorruptStream("unknown I-frame mode")),
    };
    let q = payload[1] as u32 + 1;
    if q < 2 {
        return Err(Error::CorruptStream("I-frame level count below 2"));
    }
    let (_, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut dec = RangeDecoder::new(&payload[2..]);
    let mut out = Vec::with_capacity(c * plane);
    for _ in 0..c {
        let mut m = AdaptiveModel::new(0, q as usize, if adaptive { INCREMENT } else { 0 });
        for _ in 0..plane {
            let l = dec.decode(&m)?;
            m.update(l);
            out.push(value_of(l as u32, q));
        }
    }
    dec.finish()?;
    Tensor::new(shape.to_vec(), out)
}
