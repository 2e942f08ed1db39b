//! Recurrent auto-encoders and the latent quantizer.
//!
//! Encoder: four stride-2 convolutions, GDN after the first three, with a
//! ConvLSTM cell after the second whose output is added to the features. The
//! decoder mirrors it with transposed
//! convolutions and IGDN. Without the cells (`recurrent = false`) each
//! frame is coded independently.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, ConvLstmCell, GdnLayer, LstmVars};
use crate::rpm::ALPHABET;
use crate::tensor::{Bound, ParamBuilder, Real, Tape, Tensor, Var};

/// Total spatial down-sampling factor of the encoder.
pub const REDUCTION: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentKind {
    Motion,
    Residual,
}

/// Integer latents of one frame, `N x C x H/16 x W/16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Latent {
    pub shape: [usize; 4],
    pub values: Vec<i32>,
    pub kind: LatentKind,
    pub frame_index: usize,
}

impl Latent {
    pub fn new(shape: [usize; 4], values: Vec<i32>, kind: LatentKind, frame_index: usize) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return shape_err("latent", format!("{shape:?} vs {} values", values.len()));
        }
        if let Some(&v) = values.iter().find(|v| v.abs() > ALPHABET) {
            return Err(Error::Alphabet {
                symbol: v as i64,
                min: -ALPHABET as i64,
                max: ALPHABET as i64,
            });
        }
        Ok(Self {
            shape,
            values,
            kind,
            frame_index,
        })
    }

    /// Quantize continuous encoder output.
    pub fn quantize<T: Real>(t: &Tensor<T>, kind: LatentKind, frame_index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        let mut saturated = 0usize;
        let values = t
            .data()
            .iter()
            .map(|v| {
                let (q, sat) = quantize_value(v.f64());
                saturated += sat as usize;
                q
            })
            .collect();
        if saturated > 0 {
            log::warn!("{kind:?} latent of frame {frame_index}: {saturated} values saturated at +-{ALPHABET}");
        }
        Self::new([n, c, h, w], values, kind, frame_index)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(self.shape.to_vec(), data).expect("latent shape")
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Round half away from zero, then clamp to the alphabet. The flag reports
/// whether the clamp was active beyond rounding.
pub fn quantize_value(v: f64) -> (i32, bool) {
    let r = v.round();
    let lim = ALPHABET as f64;
    if r > lim {
        (ALPHABET, true)
    } else if r < -lim {
        (-ALPHABET, true)
    } else {
        (r as i32, false)
    }
}

/// Additive uniform noise in `[-0.5, 0.5)`: the training-time stand-in for
/// rounding.
pub fn add_quantization_noise<T: Real, R: Rng>(tape: &mut Tape<T>, y: Var, rng: &mut R) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let u = (0..n).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect();
    let u = tape.constant(Tensor::new(shape, u)?);
    tape.add(y, u)
}

#[derive(Clone, Debug)]
pub struct RaeEncoder {
    down: [Conv; 4],
    gdn: [GdnLayer; 3],
    lstm: Option<ConvLstmCell>,
}

impl RaeEncoder {
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<T, R>,
        name: &str,
        cin: usize,
        width: usize,
        latent: usize,
        k: usize,
        recurrent: bool,
    ) -> Self {
        let down = [
            Conv::new(pb, &format!("{name}.d0"), cin, width, k, 2),
            Conv::new(pb, &format!("{name}.d1"), width, width, k, 2),
            Conv::new(pb, &format!("{name}.d2"), width, width, k, 2),
            Conv::new(pb, &format!("{name}.d3"), width, latent, k, 2),
        ];
        let gdn = [
            GdnLayer::new(pb, &format!("{name}.g0"), width, false),
            GdnLayer::new(pb, &format!("{name}.g1"), width, false),
            GdnLayer::new(pb, &format!("{name}.g2"), width, false),
        ];
        let lstm = recurrent.then(|| ConvLstmCell::new(pb, &format!("{name}.lstm"), width, width));
        Self { down, gdn, lstm }
    }

    pub fn is_recurrent(&self) -> bool {
        self.lstm.is_some()
    }

    /// Continuous latents and the advanced state (`None` when not
    /// recurrent).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        state: Option<LstmVars>,
    ) -> Result<(Var, Option<LstmVars>)> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        if h % REDUCTION != 0 || w % REDUCTION != 0 {
            return shape_err("rae_encode", format!("{h}x{w} not divisible by {REDUCTION}"));
        }
        let mut v = x;
        let mut st = None;
        for i in 0..4 {
            v = self.down[i].forward(tape, p, v)?;
            if i < 3 {
                v = self.gdn[i].forward(tape, p, v)?;
            }
            if i == 1 {
                if let Some(cell) = &self.lstm {
                    // additive branch: the cell refines the features
                    // rather than replacing them
                    let (o, s) = cell.step(tape, p, v, state)?;
                    v = tape.add(v, o)?;
                    st = Some(s);
                }
            }
        }
        Ok((v, st))
    }
}

#[derive(Clone, Debug)]
pub struct RaeDecoder {
    up: [Conv; 4],
    igdn: [GdnLayer; 3],
    lstm: Option<ConvLstmCell>,
}

impl RaeDecoder {
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<T, R>,
        name: &str,
        latent: usize,
        width: usize,
        cout: usize,
        k: usize,
        recurrent: bool,
    ) -> Self {
        let up = [
            Conv::transposed(pb, &format!("{name}.u0"), latent, width, k, 2),
            Conv::transposed(pb, &format!("{name}.u1"), width, width, k, 2),
            Conv::transposed(pb, &format!("{name}.u2"), width, width, k, 2),
            Conv::transposed(pb, &format!("{name}.u3"), width, cout, k, 2),
        ];
        let igdn = [
            GdnLayer::new(pb, &format!("{name}.g0"), width, true),
            GdnLayer::new(pb, &format!("{name}.g1"), width, true),
            GdnLayer::new(pb, &format!("{name}.g2"), width, true),
        ];
        let lstm = recurrent.then(|| ConvLstmCell::new(pb, &format!("{name}.lstm"), width, width));
        Self { up, igdn, lstm }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        y: Var,
        state: Option<LstmVars>,
    ) -> Result<(Var, Option<LstmVars>)> {
        let mut v = y;
        let mut st = None;
        for i in 0..4 {
            v = self.up[i].forward(tape, p, v)?;
            if i < 3 {
                v = self.igdn[i].forward(tape, p, v)?;
            }
            if i == 1 {
                if let Some(cell) = &self.lstm {
                    // additive branch: the cell refines the features
                    // rather than replacing them
                    let (o, s) = cell.step(tape, p, v, state)?;
                    v = tape.add(v, o)?;
                    st = Some(s);
                }
            }
        }
        Ok((v, st))
    }
}
