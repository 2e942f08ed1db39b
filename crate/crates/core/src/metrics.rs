//! PSNR, MS-SSIM and Bjøntegaard delta rate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Reported when two frames are identical.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err("psnr", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel().max(1) as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const CS_FLOOR: f64 = 1e-6;

/// Number of scales used for an `h x w` frame: each scale must be at least
/// one window wide and the frame must halve evenly down to it. Frames too
/// small for five scales use fewer, with the exponents renormalized.
pub fn msssim_scales(h: usize, w: usize) -> usize {
    let mut m = 1;
    while m < 5 {
        let f = 1 << m;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h / f < WINDOW || w / f < WINDOW {
            break;
        }
        m += 1;
    }
    m
}

fn gaussian(k: usize) -> Vec<f64> {
    let c = (k / 2) as f64;
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Window side at one scale: 11, or the largest odd size that fits.
fn window_for(h: usize, w: usize) -> usize {
    let m = h.min(w).min(WINDOW);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

struct Blur {
    weight: Var,
    mask: Var,
    inv_count: f64,
}

impl Blur {
    fn new<T: Real>(tape: &mut Tape<T>, n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let k = window_for(h, w);
        let g = gaussian(k);
        let mut wt = vec![0.0; c * c * k * k];
        for ch in 0..c {
            for y in 0..k {
                for x in 0..k {
                    wt[((ch * c + ch) * k + y) * k + x] = g[y] * g[x];
                }
            }
        }
        let weight = tape.constant(Tensor::from_f64(&[c, c, k, k], &wt)?);
        // zero padding only touches pixels within k/2 of the border; masking
        // them out makes the "same" convolution equal to a valid one
        let p = k / 2;
        let mut m = vec![0.0; n * c * h * w];
        let mut count = 0usize;
        for plane in 0..n * c {
            for y in p..h - p {
                for x in p..w - p {
                    m[(plane * h + y) * w + x] = 1.0;
                    count += 1;
                }
            }
        }
        let mask = tape.constant(Tensor::from_f64(&[n, c, h, w], &m)?);
        Ok(Self {
            weight,
            mask,
            inv_count: 1.0 / count as f64,
        })
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, None, 1)
    }

    fn mean<T: Real>(&self, tape: &mut Tape<T>, map: Var) -> Result<Var> {
        let m = tape.mul(map, self.mask)?;
        let s = tape.sum(m)?;
        tape.mul_scalar(s, self.inv_count)
    }
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<(Var, Var)> {
    let (n, c, h, w) = tape.value(a).dims4()?;
    let blur = Blur::new(tape, n, c, h, w)?;
    let mu_a = blur.apply(tape, a)?;
    let mu_b = blur.apply(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = blur.apply(tape, aa)?;
    let e_bb = blur.apply(tape, bb)?;
    let e_ab = blur.apply(tape, ab)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let two_cov = tape.mul_scalar(cov, 2.0)?;
    let cs_num = tape.add_scalar(two_cov, C2)?;
    let var_sum = tape.add(var_a, var_b)?;
    let cs_den = tape.add_scalar(var_sum, C2)?;
    let cs_map = tape.div(cs_num, cs_den)?;

    let two_mu = tape.mul_scalar(mu_ab, 2.0)?;
    let l_num = tape.add_scalar(two_mu, C1)?;
    let mu_sum = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(mu_sum, C1)?;
    let l_map = tape.div(l_num, l_den)?;

    let ssim_map = tape.mul(l_map, cs_map)?;
    let cs = blur.mean(tape, cs_map)?;
    let ssim = blur.mean(tape, ssim_map)?;
    Ok((ssim, cs))
}

/// Differentiable MS-SSIM of two `N x C x H x W` unit-range batches, as a
/// scalar averaged over the batch.
pub fn msssim_var<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err("msssim", format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)));
    }
    let (_, _, h, w) = tape.value(a).dims4()?;
    let scales = msssim_scales(h, w);
    let total: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let (mut a, mut b) = (a, b);
    let mut out: Option<Var> = None;
    for j in 0..scales {
        let (ssim, cs) = ssim_terms(tape, a, b)?;
        let term = if j + 1 == scales { ssim } else { cs };
        let term = tape.clamp(term, CS_FLOOR, f64::MAX)?;
        let factor = tape.pow(term, MSSSIM_WEIGHTS[j] / total)?;
        out = Some(match out {
            None => factor,
            Some(o) => tape.mul(o, factor)?,
        });
        if j + 1 < scales {
            a = tape.avg_pool2(a)?;
            b = tape.avg_pool2(b)?;
        }
    }
    Ok(out.expect("at least one scale"))
}

pub fn msssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let va = tape.constant(a.cast());
    let vb = tape.constant(b.cast());
    let m = msssim_var(&mut tape, va, vb)?;
    Ok(tape.value(m).item())
}

/// One rate-distortion operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// Least-squares cubic through `(x, y)`; coefficients lowest order first.
fn fit_cubic(x: &[f64], y: &[f64]) -> [f64; 4] {
    let mut a = [[0.0f64; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let p = [1.0, xi, xi * xi, xi * xi * xi];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += p[r] * p[c];
            }
            a[r][4] += p[r] * yi;
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("rows");
        a.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    [a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]]
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

fn check_curve(name: &str, c: &[RdPoint]) -> Result<()> {
    if c.len() < 4 {
        return Err(Error::Config(format!("BD-rate {name} curve needs at least 4 points, got {}", c.len())));
    }
    if c.iter().any(|p| !(p.bpp > 0.0) || !p.quality.is_finite()) {
        return Err(Error::Config(format!("BD-rate {name} curve has a non-positive rate or non-finite quality")));
    }
    Ok(())
}

/// Average bitrate difference of `test` against `anchor` in percent over
/// the overlapping quality range; negative means `test` saves bits.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    check_curve("anchor", anchor)?;
    check_curve("test", test)?;
    let range = |c: &[RdPoint]| {
        c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.quality), hi.max(p.quality)))
    };
    let (a_lo, a_hi) = range(anchor);
    let (t_lo, t_hi) = range(test);
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "BD-rate curves do not overlap in quality ([{a_lo}, {a_hi}] vs [{t_lo}, {t_hi}])"
        )));
    }
    // fit in a centred, scaled quality variable to keep the normal
    // equations well conditioned
    let centre = (lo + hi) / 2.0;
    let scale = (hi - lo) / 2.0;
    let fit = |c: &[RdPoint]| {
        let x: Vec<f64> = c.iter().map(|p| (p.quality - centre) / scale).collect();
        let y: Vec<f64> = c.iter().map(|p| p.bpp.log10()).collect();
        fit_cubic(&x, &y)
    };
    let (fa, ft) = (fit(anchor), fit(test));
    let avg = (integral(&ft, -1.0, 1.0) - integral(&fa, -1.0, 1.0)) / 2.0;
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// One row of an RD table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub label: String,
    pub lambda_id: u8,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

pub fn write_rd_csv<W: Write>(out: W, rows: &[RdRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        what: "csv",
        detail: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, random_tensor};
    use crate::tensor::{Constraint, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // smooth structure plus texture, so every scale carries signal
        let v = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f32, (i % w) as f32);
                0.5 + 0.3 * (x / 5.0).sin() * (y / 7.0).cos() + rng.gen_range(-0.1..0.1)
            })
            .collect();
        Tensor::new(vec![1, 1, h, w], v).unwrap()
    }

    fn add_noise(a: &Tensor<f32>, amp: f32, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = a.data().iter().map(|&v| v + rng.gen_range(-amp..=amp)).collect();
        Tensor::new(a.shape().to_vec(), v).unwrap()
    }

    #[test]
    fn psnr_fixtures() {
        let a = Tensor::full(&[1, 1, 4, 4], 0.5f32);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| if i % 2 == 0 { 0.6 } else { 0.4 }).collect()).unwrap();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        for seed in 0..5 {
            let a = image(16, 16, seed);
            let ps: Vec<f64> = [0.01, 0.03, 0.1, 0.3].iter().map(|&amp| psnr(&a, &add_noise(&a, amp, seed + 100), 1.0).unwrap()).collect();
            assert!(ps.windows(2).all(|w| w[0] > w[1]), "{ps:?}");
        }
    }

    #[test]
    fn scale_selection() {
        assert_eq!(msssim_scales(176, 176), 5);
        assert_eq!(msssim_scales(256, 256), 5);
        assert_eq!(msssim_scales(175, 176), 1);
        assert_eq!(msssim_scales(64, 64), 3);
        assert_eq!(msssim_scales(32, 32), 2);
        assert_eq!(msssim_scales(16, 16), 1);
        assert_eq!(window_for(8, 16), 7);
    }

    #[test]
    fn msssim_identity_is_exactly_one() {
        for (h, w, seed) in [(64, 64, 1), (32, 48, 2), (176, 176, 3), (8, 8, 4)] {
            let a = image(h, w, seed);
            assert_eq!(msssim(&a, &a).unwrap(), 1.0, "{h}x{w}");
        }
    }

    /// Direct valid-window MS-SSIM in f64 loops, no tape.
    fn naive_msssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let scales = msssim_scales(h, w);
        let total: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
        let (mut a, mut b, mut h, mut w) = (a.to_vec(), b.to_vec(), h, w);
        let mut out = 1.0;
        for j in 0..scales {
            let k = window_for(h, w);
            let g = gaussian(k);
            let (mut ssim_sum, mut cs_sum, mut n) = (0.0, 0.0, 0.0);
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let wt = g[dy] * g[dx];
                            let (va, vb) = (a[(y0 + dy) * w + x0 + dx], b[(y0 + dy) * w + x0 + dx]);
                            ma += wt * va;
                            mb += wt * vb;
                            saa += wt * va * va;
                            sbb += wt * vb * vb;
                            sab += wt * va * vb;
                        }
                    }
                    let cs = (2.0 * (sab - ma * mb) + C2) / (saa - ma * ma + sbb - mb * mb + C2);
                    let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
                    ssim_sum += l * cs;
                    cs_sum += cs;
                    n += 1.0;
                }
            }
            let term = if j + 1 == scales { ssim_sum / n } else { cs_sum / n };
            out *= term.max(CS_FLOOR).powf(MSSSIM_WEIGHTS[j] / total);
            let pool = |v: &[f64]| {
                let mut o = vec![0.0; h * w / 4];
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        o[y * (w / 2) + x] = (v[2 * y * w + 2 * x] + v[2 * y * w + 2 * x + 1] + v[(2 * y + 1) * w + 2 * x] + v[(2 * y + 1) * w + 2 * x + 1]) / 4.0;
                    }
                }
                o
            };
            a = pool(&a);
            b = pool(&b);
            h /= 2;
            w /= 2;
        }
        out
    }

    #[test]
    fn msssim_matches_direct_valid_window_oracle() {
        for (h, w, seed) in [(48, 48, 5), (32, 64, 6), (16, 16, 7)] {
            let a = image(h, w, seed);
            let b = add_noise(&a, 0.1, seed + 1);
            let got = msssim(&a, &b).unwrap();
            let a64: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
            let b64: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
            let want = naive_msssim(&a64, &b64, h, w);
            assert!((got - want).abs() < 1e-9, "{h}x{w}: {got} vs {want}");
            assert!(got > 0.0 && got < 1.0);
        }
    }

    #[test]
    fn msssim_ranking_follows_noise() {
        for seed in 0..3 {
            let a = image(64, 64, seed);
            let mut prev = 1.0;
            for amp in [0.02, 0.05, 0.15, 0.4] {
                let m = msssim(&a, &add_noise(&a, amp, seed + 50)).unwrap();
                assert!(m < prev, "amp {amp}: {m} !< {prev}");
                prev = m;
            }
        }
    }

    #[test]
    fn msssim_gradients() {
        for seed in 0..4 {
            let base = random_tensor(&[1, 1, 24, 24], seed).map(|v| 0.5 + 0.3 * v);
            let other = base.clone();
            let noise = random_tensor(&[1, 1, 24, 24], seed + 99);
            let target = Tensor::new(vec![1, 1, 24, 24], other.data().iter().zip(noise.data()).map(|(a, n)| a + 0.1 * n).collect()).unwrap();
            let mut store = ParamStore::<f64>::new();
            store.add("x", base, Constraint::None);
            let err = check_gradients(&store, |tape, p| {
                let x = p.get(store.find("x").unwrap());
                let t = tape.constant(target.clone());
                let m = msssim_var(tape, x, t)?;
                let neg = tape.neg(m)?;
                tape.add_scalar(neg, 1.0)
            });
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    fn curve(rates: &[f64], q: &[f64]) -> Vec<RdPoint> {
        rates.iter().zip(q).map(|(&bpp, &quality)| RdPoint { bpp, quality }).collect()
    }

    #[test]
    fn bd_rate_fixtures() {
        let q = [30.0, 32.0, 34.5, 37.0];
        let a = curve(&[0.1, 0.2, 0.4, 0.8], &q);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let doubled = curve(&[0.2, 0.4, 0.8, 1.6], &q);
        let d = bd_rate(&a, &doubled).unwrap();
        assert!((d - 100.0).abs() < 0.1, "{d}");
        let back = bd_rate(&doubled, &a).unwrap();
        assert!((back - (-d / (1.0 + d / 100.0))).abs() < 1.0, "{back}");
    }

    #[test]
    fn bd_rate_reciprocity_on_crossing_curves() {
        let a = curve(&[0.1, 0.2, 0.4, 0.8], &[30.0, 32.0, 34.5, 37.0]);
        let b = curve(&[0.09, 0.21, 0.35, 0.9], &[30.5, 32.5, 34.0, 37.5]);
        let ab = bd_rate(&a, &b).unwrap();
        let ba = bd_rate(&b, &a).unwrap();
        let expect = -ab / (1.0 + ab / 100.0);
        assert!((ba - expect).abs() < 1.0, "{ab} {ba} {expect}");
    }

    /// Curves whose log-rate is an exact cubic of quality, integrated with a
    /// dense trapezoid rule.
    #[test]
    fn bd_rate_matches_dense_trapezoid() {
        let la = |q: f64| -3.0 + 0.08 * q + 0.0005 * (q - 33.0).powi(2) + 0.0001 * (q - 33.0).powi(3);
        let lb = |q: f64| -3.1 + 0.085 * q - 0.0004 * (q - 33.0).powi(2);
        let qa = [29.0, 31.0, 34.0, 38.0];
        let qb = [30.0, 33.0, 35.0, 39.0];
        let a: Vec<RdPoint> = qa.iter().map(|&q| RdPoint { bpp: 10f64.powf(la(q)), quality: q }).collect();
        let b: Vec<RdPoint> = qb.iter().map(|&q| RdPoint { bpp: 10f64.powf(lb(q)), quality: q }).collect();
        let (lo, hi) = (30.0, 38.0);
        let n = 100_000;
        let dq = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let q = lo + i as f64 * dq;
            let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += wgt * (lb(q) - la(q)) * dq;
        }
        let oracle = (10f64.powf(acc / (hi - lo)) - 1.0) * 100.0;
        let got = bd_rate(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 0.005 * oracle.abs().max(1.0), "{got} vs {oracle}");
    }

    #[test]
    fn bd_rate_errors() {
        let a = curve(&[0.1, 0.2, 0.4, 0.8], &[30.0, 31.0, 32.0, 33.0]);
        let far = curve(&[0.1, 0.2, 0.4, 0.8], &[40.0, 41.0, 42.0, 43.0]);
        assert!(bd_rate(&a, &far).is_err());
        assert!(bd_rate(&a, &a[..3]).is_err());
    }

    #[test]
    fn rd_csv_has_header_and_rows() {
        let mut out = Vec::new();
        let rows = vec![RdRow {
            label: "BL".into(),
            lambda_id: 2,
            bpp: 0.25,
            psnr: 31.5,
            msssim: 0.97,
        }];
        write_rd_csv(&mut out, &rows).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "label,lambda_id,bpp,psnr,msssim\nBL,2,0.25,31.5,0.97\n");
    }
}
