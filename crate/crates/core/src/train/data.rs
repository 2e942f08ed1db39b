//! Synthetic training sequences.
//!
//! `Mixed` draws translating textured patches or rotating gradients, plus
//! a little temporal noise. `Ar1` draws a translating texture overlaid with
//! a brightness drift confined to a few persistent blobs. The per-frame
//! drift increment is a smooth field `d_t = rho * d_{t-1} + sqrt(1 - rho^2) * e_t`,
//! so what motion compensation cannot predict, and hence what a P-frame
//! has to carry, is itself correlated from one frame to the next. An AR(1)
//! process on the brightness level would not do that: its increments have
//! lag-one correlation `-(1 - rho) / 2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Mixed,
    Ar1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Square frame side in pixels.
    pub size: usize,
    pub channels: usize,
    /// Frames per sample: one I-frame then P-frames.
    pub seq_len: usize,
    /// Largest per-frame displacement in pixels.
    pub motion: f64,
    /// Temporal correlation of the drift increments (`Ar1`).
    pub rho: f64,
    /// Standard deviation of the drift increment at a blob centre (`Ar1`).
    pub flicker: f64,
    /// Standard deviation of per-frame white noise.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Mixed,
            size: 64,
            channels: 1,
            seq_len: 7,
            motion: 2.0,
            rho: 0.9,
            flicker: 0.03,
            noise: 0.005,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config(format!("seq_len must be at least 2, got {}", self.seq_len)));
        }
        if self.size == 0 || (self.channels != 1 && self.channels != 3) {
            return Err(Error::Config(format!("bad frame geometry {}x{} with {} channels", self.size, self.size, self.channels)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }
}

/// Smooth texture defined analytically, so it can be sampled at any
/// sub-pixel offset without interpolation.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    blobs: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let waves = (0..5)
            .map(|_| {
                let f = rng.gen_range(0.04..0.35);
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.03..0.1))
            })
            .collect();
        let blobs = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.0..size),
                    rng.gen_range(0.0..size),
                    rng.gen_range(size / 12.0..size / 4.0),
                    rng.gen_range(-0.25..0.25),
                )
            })
            .collect();
        Self { waves, blobs }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let w: f64 = self.waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum();
        let b: f64 = self
            .blobs
            .iter()
            .map(|&(cx, cy, r, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum();
        0.5 + w + b
    }
}

enum Scene {
    Patches {
        bg: Texture,
        fg: Texture,
        v_bg: (f64, f64),
        v_fg: (f64, f64),
        rect: (f64, f64, f64, f64),
    },
    Rotation {
        tex: Texture,
        centre: (f64, f64),
        theta: f64,
        omega: f64,
        slope: f64,
    },
    Flicker {
        bg: Texture,
        v: (f64, f64),
        envelope: Vec<f64>,
        /// Current increment `d_t`.
        rate: Vec<f64>,
        /// Accumulated drift.
        level: Vec<f64>,
    },
}

pub struct SyntheticDataset {
    cfg: DataConfig,
    rng: ChaCha8Rng,
}

impl SyntheticDataset {
    pub fn new(cfg: DataConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    fn velocity(&mut self) -> (f64, f64) {
        let m = self.cfg.motion;
        if m <= 0.0 {
            return (0.0, 0.0);
        }
        (self.rng.gen_range(-m..=m), self.rng.gen_range(-m..=m))
    }

    /// Smooth unit-variance field: white noise on a coarse grid, bilinearly
    /// upsampled.
    fn smooth_field(&mut self, size: usize) -> Vec<f64> {
        let cell = 8usize;
        let g = size / cell + 2;
        let coarse: Vec<f64> = (0..g * g).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let c = |yy: usize, xx: usize| coarse[yy * g + xx];
                let top = c(y0, x0) * (1.0 - tx) + c(y0, x0 + 1) * tx;
                let bot = c(y0 + 1, x0) * (1.0 - tx) + c(y0 + 1, x0 + 1) * tx;
                // bilinear interpolation of unit-variance nodes has variance
                // below one between nodes; rescaling by the node weights
                // restores it exactly
                let wsq = ((1.0 - ty).powi(2) + ty * ty) * ((1.0 - tx).powi(2) + tx * tx);
                out.push((top * (1.0 - ty) + bot * ty) / wsq.sqrt());
            }
        }
        out
    }

    fn scene(&mut self) -> Scene {
        let size = self.cfg.size as f64;
        match self.cfg.kind {
            DataKind::Mixed if self.rng.gen_bool(0.7) => {
                let w = self.rng.gen_range(size * 0.25..size * 0.6);
                let h = self.rng.gen_range(size * 0.25..size * 0.6);
                let rect = (self.rng.gen_range(0.0..size - w), self.rng.gen_range(0.0..size - h), w, h);
                Scene::Patches {
                    bg: Texture::random(&mut self.rng, size),
                    fg: Texture::random(&mut self.rng, size),
                    v_bg: self.velocity(),
                    v_fg: self.velocity(),
                    rect,
                }
            }
            DataKind::Mixed => Scene::Rotation {
                tex: Texture::random(&mut self.rng, size),
                centre: (self.rng.gen_range(0.0..size), self.rng.gen_range(0.0..size)),
                theta: self.rng.gen_range(0.0..std::f64::consts::TAU),
                omega: self.rng.gen_range(-0.05..0.05) * self.cfg.motion.max(0.1),
                slope: self.rng.gen_range(0.2..0.5) / size,
            },
            DataKind::Ar1 => {
                let n = self.cfg.size;
                let mut envelope = vec![0.0; n * n];
                for _ in 0..self.rng.gen_range(1..=3) {
                    let (cx, cy) = (self.rng.gen_range(0.0..size), self.rng.gen_range(0.0..size));
                    let r = self.rng.gen_range(size / 8.0..size / 4.0);
                    for (i, e) in envelope.iter_mut().enumerate() {
                        let (x, y) = ((i % n) as f64, (i / n) as f64);
                        *e += (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp();
                    }
                }
                for e in &mut envelope {
                    *e = e.min(1.0) * self.cfg.flicker;
                }
                Scene::Flicker {
                    bg: Texture::random(&mut self.rng, size),
                    v: self.velocity(),
                    envelope,
                    rate: self.smooth_field(n),
                    level: vec![0.0; n * n],
                }
            }
        }
    }

    /// One sequence of `seq_len` frames, each `1 x C x size x size`.
    pub fn sequence(&mut self) -> Vec<Tensor<f32>> {
        let n = self.cfg.size;
        let c = self.cfg.channels;
        let gains: Vec<(f64, f64)> = (0..c)
            .map(|_| if c == 1 { (1.0, 0.0) } else { (self.rng.gen_range(0.8..1.2), self.rng.gen_range(-0.05..0.05)) })
            .collect();
        let mut scene = self.scene();
        let rho = self.cfg.rho;
        let mut frames = Vec::with_capacity(self.cfg.seq_len);
        for t in 0..self.cfg.seq_len {
            if t > 0 {
                if let Scene::Flicker { rate, level, .. } = &mut scene {
                    let e = self.smooth_field(n);
                    let k = (1.0 - rho * rho).sqrt();
                    for ((d, l), e) in rate.iter_mut().zip(level.iter_mut()).zip(e) {
                        if t > 1 {
                            *d = rho * *d + k * e;
                        }
                        *l += *d;
                    }
                }
            }
            let tf = t as f64;
            let mut luma = vec![0.0; n * n];
            for (i, l) in luma.iter_mut().enumerate() {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                *l = match &scene {
                    Scene::Patches { bg, fg, v_bg, v_fg, rect } => {
                        let (rx, ry) = (rect.0 + v_fg.0 * tf, rect.1 + v_fg.1 * tf);
                        if x >= rx && x < rx + rect.2 && y >= ry && y < ry + rect.3 {
                            fg.at(x - v_fg.0 * tf, y - v_fg.1 * tf)
                        } else {
                            bg.at(x - v_bg.0 * tf, y - v_bg.1 * tf)
                        }
                    }
                    Scene::Rotation { tex, centre, theta, omega, slope } => {
                        let a = theta + omega * tf;
                        let (dx, dy) = (x - centre.0, y - centre.1);
                        let (xr, yr) = (dx * a.cos() + dy * a.sin(), -dx * a.sin() + dy * a.cos());
                        0.5 * tex.at(xr + centre.0, yr + centre.1) + 0.5 * (0.5 + slope * xr)
                    }
                    Scene::Flicker { bg, v, envelope, level, .. } => {
                        bg.at(x - v.0 * tf, y - v.1 * tf) + envelope[i] * level[i]
                    }
                };
            }
            let mut data = Vec::with_capacity(c * n * n);
            for &(g, o) in &gains {
                for &l in &luma {
                    let noise: f64 = if self.cfg.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        self.cfg.noise * z
                    } else {
                        0.0
                    };
                    data.push(((l * g + o + noise).clamp(0.0, 1.0)) as f32);
                }
            }
            frames.push(Tensor::new(vec![1, c, n, n], data).expect("frame shape"));
        }
        frames
    }

    /// `batch` sequences stacked along the batch axis, one tensor per time
    /// step.
    pub fn batch(&mut self, batch: usize) -> Vec<Tensor<f32>> {
        let seqs: Vec<Vec<Tensor<f32>>> = (0..batch).map(|_| self.sequence()).collect();
        (0..self.cfg.seq_len)
            .map(|t| {
                let items: Vec<Tensor<f32>> = seqs.iter().map(|s| s[t].clone()).collect();
                Tensor::stack_batch(&items).expect("same frame shapes")
            })
            .collect()
    }
}
