//! Network building blocks: convolutions, ConvLSTM cells and GDN/IGDN.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{Bound, Constraint, ParamBuilder, ParamId, Real, Tape, Tensor, Var};

/// Lower bound on GDN `beta`.
pub const BETA_MIN: f64 = 1e-6;

/// Convolution (or transposed convolution) with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    transposed: bool,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = pb.uniform(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k);
        let b = pb.constant(&format!("{name}.b"), Tensor::zeros(&[cout]), Constraint::None);
        Self {
            w,
            b,
            stride,
            transposed: false,
        }
    }

    /// Transposed convolution multiplying spatial extents by `stride`.
    pub fn transposed<T: Real, R: Rng>(
        pb: &mut ParamBuilder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let w = pb.uniform(&format!("{name}.w"), &[cin, cout, k, k], fan_in);
        let b = pb.constant(&format!("{name}.b"), Tensor::zeros(&[cout]), Constraint::None);
        Self {
            w,
            b,
            stride,
            transposed: true,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.get(self.w), Some(p.get(self.b)));
        if self.transposed {
            tape.conv_transpose2d(x, w, b, self.stride)
        } else {
            tape.conv2d(x, w, b, self.stride)
        }
    }
}

/// `(h, c)` of one ConvLSTM cell, as values on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

/// `(h, c)` of one ConvLSTM cell, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> RecurrentState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }

    pub fn to_tape(&self, tape: &mut Tape<T>) -> LstmVars {
        LstmVars {
            h: tape.constant(self.h.clone()),
            c: tape.constant(self.c.clone()),
        }
    }

    pub fn from_tape(tape: &Tape<T>, v: LstmVars) -> Self {
        Self {
            h: tape.value(v.h).clone(),
            c: tape.value(v.c).clone(),
        }
    }

    pub fn digest(&self) -> u64 {
        self.h.digest() ^ self.c.digest().rotate_left(17)
    }
}

/// Convolutional LSTM: all four gates come from one 3x3 convolution over the
/// channel concatenation `[x; h]`, ordered input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    conv: Conv,
    hidden: usize,
}

impl ConvLstmCell {
    pub const KERNEL: usize = 3;

    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<T, R>, name: &str, input: usize, hidden: usize) -> Self {
        let k = Self::KERNEL;
        let fan_in = (input + hidden) * k * k;
        let w = pb.uniform(&format!("{name}.w"), &[4 * hidden, input + hidden, k, k], fan_in);
        let mut bias = vec![T::zero(); 4 * hidden];
        // forget gate starts open
        for v in &mut bias[hidden..2 * hidden] {
            *v = T::one();
        }
        let b = pb.constant(
            &format!("{name}.b"),
            Tensor::new(vec![4 * hidden], bias).expect("bias shape"),
            Constraint::None,
        );
        Self {
            conv: Conv {
                w,
                b,
                stride: 1,
                transposed: false,
            },
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn conv(&self) -> &Conv {
        &self.conv
    }

    pub fn zero_state<T: Real>(&self, tape: &mut Tape<T>, n: usize, h: usize, w: usize) -> LstmVars {
        let shape = [n, self.hidden, h, w];
        LstmVars {
            h: tape.constant(Tensor::zeros(&shape)),
            c: tape.constant(Tensor::zeros(&shape)),
        }
    }

    /// One recurrent step. `state = None` is the all-zero initial state.
    /// Returns the output (equal to the new `h`) and the new state.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        state: Option<LstmVars>,
    ) -> Result<(Var, LstmVars)> {
        let (n, _, h, w) = tape.value(x).dims4()?;
        let state = match state {
            Some(s) => {
                let want = [n, self.hidden, h, w];
                if tape.shape(s.h) != want || tape.shape(s.c) != want {
                    return shape_err(
                        "convlstm_step",
                        format!("state {:?} does not match input {:?}", tape.shape(s.h), tape.shape(x)),
                    );
                }
                s
            }
            None => self.zero_state(tape, n, h, w),
        };
        let xh = tape.concat(&[x, state.h])?;
        let z = self.conv.forward(tape, p, xh)?;
        let hd = self.hidden;
        let zi = tape.slice_channels(z, 0, hd)?;
        let zf = tape.slice_channels(z, hd, hd)?;
        let zo = tape.slice_channels(z, 2 * hd, hd)?;
        let zg = tape.slice_channels(z, 3 * hd, hd)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let o = tape.sigmoid(zo)?;
        let g = tape.tanh(zg)?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, LstmVars { h: h_new, c }))
    }
}

/// GDN (encoder side) or IGDN (decoder side) activation.
#[derive(Clone, Debug)]
pub struct GdnLayer {
    beta: ParamId,
    gamma: ParamId,
    inverse: bool,
}

impl GdnLayer {
    /// `beta = 1`, `gamma = 0.1 I`.
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<T, R>, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = pb.constant(&format!("{name}.beta"), Tensor::full(&[channels], T::one()), Constraint::Min(BETA_MIN));
        let mut g = Tensor::zeros(&[channels, channels]);
        for c in 0..channels {
            g.data_mut()[c * channels + c] = T::of(0.1);
        }
        let gamma = pb.constant(&format!("{name}.gamma"), g, Constraint::Min(0.0));
        Self { beta, gamma, inverse }
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.gdn(x, p.get(self.beta), p.get(self.gamma), self.inverse)
    }
}
