//! Central finite-difference gradient oracle and random fixtures for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use super::{Bound, ParamStore, Tape, Tensor, Var};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(v * r)` for a fixed random `r`: a scalar loss whose gradient is a
/// generic direction rather than all ones.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(random_tensor(tape.shape(v), seed ^ 0xabc));
    let m = tape.mul(v, r)?;
    tape.sum(m)
}

/// Largest relative error between analytic and central-difference
/// (h = 1e-5) gradients over (a deterministic sample of) every parameter
/// element. Relative error is `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn check_gradients<F>(store: &ParamStore<f64>, loss: F) -> f64
where
    F: FnMut(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    worst_error(store, &[1e-5], false, loss)
}

/// As [`check_gradients`], but each element is compared against central
/// differences at every step in `steps` and the closest agreement counts.
/// Whole networks need this: a bias moves thousands of ReLU inputs and
/// warp sample positions at once, and any of them within `h` of a kink
/// spoils that one difference quotient. An analytic error shows up at every
/// step size. The `1e-5` floor of the relative error is scaled by
/// `max(1, |loss|)`, since that is the resolution of a difference
/// quotient on a loss of that size.
pub fn check_gradients_steps<F>(store: &ParamStore<f64>, steps: &[f64], loss: F) -> f64
where
    F: FnMut(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    worst_error(store, steps, true, loss)
}

fn worst_error<F>(store: &ParamStore<f64>, steps: &[f64], scaled_floor: bool, mut loss: F) -> f64
where
    F: FnMut(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    const PER_PARAM: usize = 24;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l = loss(&mut tape, &p).expect("forward");
    let floor = if scaled_floor { 1e-5 * tape.value(l).item().abs().max(1.0) } else { 1e-5 };
    let grads = tape.backward(l).expect("backward");

    let eval = |s: &ParamStore<f64>, loss: &mut F| -> f64 {
        let mut t = Tape::new();
        let p = s.bind_frozen(&mut t);
        let l = loss(&mut t, &p).expect("forward");
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for (id, var) in p.vars() {
        let g = grads.get(var);
        let n = g.numel();
        let stride = (n / PER_PARAM).max(1);
        for k in (0..n).step_by(stride) {
            let orig = work.get(id).data()[k];
            let analytic = g.data()[k];
            let mut best = f64::INFINITY;
            for &h in steps {
                work.get_mut(id).data_mut()[k] = orig + h;
                let up = eval(&work, &mut loss);
                work.get_mut(id).data_mut()[k] = orig - h;
                let down = eval(&work, &mut loss);
                work.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                best = best.min(rel);
            }
            worst = worst.max(best);
        }
    }
    worst
}
