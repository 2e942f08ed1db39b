//! Coarse-to-fine optical flow, warping and motion compensation.
//!
//! Flow tensors are `N x 2 x H x W`: channel 0 is the horizontal
//! displacement and channel 1 the vertical one, in pixels. Warping is the
//! tape's bilinear backward warp with clamp-to-edge sampling.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::Conv;
use crate::tensor::{Bound, ParamBuilder, Real, Tape, Tensor, Var};

const FLOW_LAYERS: usize = 4;
const MC_LAYERS: usize = 6;
const INPUT_GAIN: f64 = 4.0;

/// A plain stack of 3x3 convolutions with ReLU between them.
#[derive(Clone, Debug)]
struct ConvStack {
    convs: Vec<Conv>,
}

impl ConvStack {
    fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<T, R>, name: &str, cin: usize, width: usize, cout: usize, layers: usize) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let a = if i == 0 { cin } else { width };
                let b = if i + 1 == layers { cout } else { width };
                Conv::new(pb, &format!("{name}.c{i}"), a, b, 3, 1)
            })
            .collect();
        Self { convs }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(tape, p, x)?;
            if i != last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// One refinement network per pyramid level; level `l` runs at scale
/// `1 / 2^l`.
#[derive(Clone, Debug)]
pub struct FlowPyramidNet {
    levels: Vec<ConvStack>,
}

impl FlowPyramidNet {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<T, R>, name: &str, channels: usize, width: usize, levels: usize) -> Self {
        assert!(levels >= 1);
        let levels = (0..levels)
            .map(|l| ConvStack::new(pb, &format!("{name}.l{l}"), 2 * channels + 2, width, 2, FLOW_LAYERS))
            .collect();
        Self { levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Flow warping `reference` onto `current`.
    pub fn estimate<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, reference: Var, current: Var) -> Result<Var> {
        let (n, _, h, w) = tape.value(current).dims4()?;
        if tape.shape(reference) != tape.shape(current) {
            return shape_err("estimate_flow", format!("{:?} vs {:?}", tape.shape(reference), tape.shape(current)));
        }
        let div = 1 << (self.levels.len() - 1);
        if h % div != 0 || w % div != 0 {
            return shape_err("estimate_flow", format!("{h}x{w} not divisible by {div}"));
        }
        let mut refs = vec![reference];
        let mut curs = vec![current];
        for _ in 1..self.levels.len() {
            let r = tape.avg_pool2(*refs.last().expect("non-empty"))?;
            let c = tape.avg_pool2(*curs.last().expect("non-empty"))?;
            refs.push(r);
            curs.push(c);
        }
        let top = self.levels.len() - 1;
        let mut flow = tape.constant(Tensor::zeros(&[n, 2, h / div, w / div]));
        for l in (0..=top).rev() {
            if l != top {
                let up = tape.upsample2x(flow)?;
                flow = tape.mul_scalar(up, 2.0)?;
            }
            let warped = tape.warp(refs[l], flow)?;
            let a = normalize(tape, warped)?;
            let b = normalize(tape, curs[l])?;
            let inp = tape.concat(&[a, b, flow])?;
            let res = self.levels[l].forward(tape, p, inp)?;
            flow = tape.add(flow, res)?;
        }
        Ok(flow)
    }
}

/// Centre and stretch `[0, 1]` frames so the level nets see roughly
/// unit-scale inputs.
fn normalize<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.add_scalar(x, -0.5)?;
    tape.mul_scalar(c, INPUT_GAIN)
}

/// Refines the warped reference from `[warped; flow; reference]`, with a
/// skip connection from the warped frame to the output.
#[derive(Clone, Debug)]
pub struct McNet {
    stack: ConvStack,
}

impl McNet {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<T, R>, name: &str, channels: usize, width: usize) -> Self {
        Self {
            stack: ConvStack::new(pb, name, 2 * channels + 2, width, channels, MC_LAYERS),
        }
    }

    /// `clamp(warp(reference, flow) + net(...), 0, 1)`.
    pub fn compensate<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, reference: Var, flow: Var) -> Result<Var> {
        let warped = tape.warp(reference, flow)?;
        let inp = tape.concat(&[warped, flow, reference])?;
        let res = self.stack.forward(tape, p, inp)?;
        let sum = tape.add(warped, res)?;
        tape.clamp(sum, 0.0, 1.0)
    }
}

/// Mean endpoint error between two flows.
pub fn endpoint_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (n, c, h, w) = a.dims4()?;
    if c != 2 || a.shape() != b.shape() {
        return shape_err("endpoint_error", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let plane = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for ni in 0..n {
        for i in 0..plane {
            let du = ad[ni * 2 * plane + i].f64() - bd[ni * 2 * plane + i].f64();
            let dv = ad[(ni * 2 + 1) * plane + i].f64() - bd[(ni * 2 + 1) * plane + i].f64();
            total += (du * du + dv * dv).sqrt();
        }
    }
    Ok(total / (n * plane) as f64)
}
