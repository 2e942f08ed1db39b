//! Probability models for latent symbols.
//!
//! Each latent element is modelled by a logistic distribution discretized
//! to unit bins on `[-bound, bound]`, the two edge bins absorbing the tails.
//! The recurrent probability model predicts `(mu, s)` for every element of
//! frame `t` from the decoded latents of frame `t - 1` and its ConvLSTM
//! state, which summarises everything before that. The factorized model has
//! one learned `(mu, s)` per channel and no context.

use rand::Rng;

use crate::coder::QuantizedCdf;
use crate::error::Result;
use crate::layers::{Conv, ConvLstmCell, LstmVars};
use crate::tensor::{Bound, Constraint, ParamBuilder, ParamId, Real, Tape, Tensor, Var};

/// Latent alphabet bound: symbols live in `[-ALPHABET, ALPHABET]`.
pub const ALPHABET: i32 = 64;
/// Floor on the logistic scale.
pub const S_MIN: f64 = 0.01;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without cancellation.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn logistic_cdf(x: f64, mu: f64, s: f64) -> f64 {
    sigmoid((x - mu) / s)
}

/// Log-probability of one discretized-logistic bin and its partial
/// derivatives with respect to the standardized bin edges
/// `a = (y + 0.5 - mu) / s` and `b = (y - 0.5 - mu) / s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogPmf {
    pub log_p: f64,
    pub d_upper: f64,
    pub d_lower: f64,
}

pub fn log_pmf(y: f64, mu: f64, s: f64, bound: i32) -> LogPmf {
    let a = (y + 0.5 - mu) / s;
    let b = (y - 0.5 - mu) / s;
    let top = y > bound as f64 - 0.5;
    let bottom = y < -(bound as f64) + 0.5;
    match (bottom, top) {
        (true, true) => LogPmf {
            log_p: 0.0,
            d_upper: 0.0,
            d_lower: 0.0,
        },
        (false, true) => LogPmf {
            log_p: log_sigmoid(-b),
            d_upper: 0.0,
            d_lower: -sigmoid(b),
        },
        (true, false) => LogPmf {
            log_p: log_sigmoid(a),
            d_upper: sigmoid(-a),
            d_lower: 0.0,
        },
        (false, false) if a + b <= 0.0 => {
            let (la, lb) = (log_sigmoid(a), log_sigmoid(b));
            let one_minus_r = -(lb - la).exp_m1();
            let r = 1.0 - one_minus_r;
            LogPmf {
                log_p: la + one_minus_r.ln(),
                d_upper: sigmoid(-a) / one_minus_r,
                d_lower: -sigmoid(-b) * r / one_minus_r,
            }
        }
        (false, false) => {
            // p = sigmoid(-b) - sigmoid(-a)
            let (la, lb) = (log_sigmoid(-b), log_sigmoid(-a));
            let one_minus_r = -(lb - la).exp_m1();
            let r = 1.0 - one_minus_r;
            LogPmf {
                log_p: la + one_minus_r.ln(),
                d_upper: sigmoid(a) * r / one_minus_r,
                d_lower: -sigmoid(b) / one_minus_r,
            }
        }
    }
}

pub fn logistic_pmf(y: i32, mu: f64, s: f64, bound: i32) -> f64 {
    log_pmf(y as f64, mu, s, bound).log_p.exp()
}

/// Quantized tables for every element.
pub fn cdfs_for(mu: &[f64], s: &[f64], bound: i32) -> Vec<QuantizedCdf> {
    mu.iter().zip(s).map(|(&m, &sc)| QuantizedCdf::logistic(m, sc, bound)).collect()
}

/// Exact code length in bits of `symbols` under the quantized tables the
/// range coder uses.
pub fn rate_bits(symbols: &[i32], mu: &[f64], s: &[f64], bound: i32) -> Result<f64> {
    let mut bits = 0.0;
    for ((&y, &m), &sc) in symbols.iter().zip(mu).zip(s) {
        bits += QuantizedCdf::logistic(m, sc, bound).bits(y)?;
    }
    Ok(bits)
}

/// Per-element `(mu, s)` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PmfVars {
    pub mu: Var,
    pub s: Var,
}

impl PmfVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> (Vec<f64>, Vec<f64>) {
        let f = |v: Var| tape.value(v).data().iter().map(|x| x.f64()).collect();
        (f(self.mu), f(self.s))
    }

    /// Per-element bits of `y` (continuous relaxation; differentiable).
    pub fn bits<T: Real>(&self, tape: &mut Tape<T>, y: Var) -> Result<Var> {
        tape.logistic_bits(y, self.mu, self.s, ALPHABET)
    }
}

/// conv-relu, conv-relu, ConvLSTM, conv-relu, conv to `2C` channels. The
/// second half passes through `softplus(.) + S_MIN`.
#[derive(Clone, Debug)]
pub struct RpmNet {
    c1: Conv,
    c2: Conv,
    lstm: ConvLstmCell,
    c3: Conv,
    c4: Conv,
    channels: usize,
}

impl RpmNet {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<T, R>, name: &str, channels: usize, width: usize) -> Self {
        Self {
            c1: Conv::new(pb, &format!("{name}.c1"), channels, width, 3, 1),
            c2: Conv::new(pb, &format!("{name}.c2"), width, width, 3, 1),
            lstm: ConvLstmCell::new(pb, &format!("{name}.lstm"), width, width),
            c3: Conv::new(pb, &format!("{name}.c3"), width, width, 3, 1),
            c4: Conv::new(pb, &format!("{name}.c4"), width, 2 * channels, 3, 1),
            channels,
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    /// PMF parameters for frame `t` from the latents of frame `t - 1`.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        y_prev: Var,
        state: Option<LstmVars>,
    ) -> Result<(PmfVars, LstmVars)> {
        let x = self.c1.forward(tape, p, y_prev)?;
        let x = tape.relu(x)?;
        let x = self.c2.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        let (x, st) = self.lstm.step(tape, p, x, state)?;
        let x = self.c3.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        let out = self.c4.forward(tape, p, x)?;
        let mu = tape.slice_channels(out, 0, self.channels)?;
        let raw = tape.slice_channels(out, self.channels, self.channels)?;
        let sp = tape.softplus(raw)?;
        let s = tape.add_scalar(sp, S_MIN)?;
        Ok((PmfVars { mu, s }, st))
    }
}

/// One `(mu, s)` per channel shared by every position and frame.
#[derive(Clone, Debug)]
pub struct FactorizedModel {
    mu: ParamId,
    s: ParamId,
}

impl FactorizedModel {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<T, R>, name: &str, channels: usize) -> Self {
        let mu = pb.constant(&format!("{name}.mu"), Tensor::zeros(&[channels]), Constraint::None);
        let s = pb.constant(&format!("{name}.s"), Tensor::full(&[channels], T::one()), Constraint::Min(S_MIN));
        Self { mu, s }
    }

    pub fn params<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, shape: &[usize]) -> Result<PmfVars> {
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        Ok(PmfVars {
            mu: tape.expand_channels(p.get(self.mu), n, h, w)?,
            s: tape.expand_channels(p.get(self.s), n, h, w)?,
        })
    }
}
