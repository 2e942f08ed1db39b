//! Staged training: motion estimation, then motion compensation, then the
//! first P-frame, then the full unrolled sequence.
//!
//! Every stage minimises `lambda * D + R` with `R` in bits per pixel,
//! latents relaxed by additive uniform noise, and Adam. A stage ends when
//! the mean loss over the last window improves on the window before by
//! less than the tolerance at the smallest learning rate, or at
//! `max_steps`.

pub mod data;
pub mod harness;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::iframe;
use crate::error::{Error, Result};
use crate::metrics::{csv_err, msssim_var};
use crate::model::{CheckpointMeta, CodecModel, Distortion, Quantization, StepVars};
use crate::tensor::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub use data::{DataConfig, DataKind, SyntheticDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "ME")]
    Me,
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "P1")]
    P1,
    #[serde(rename = "FULL")]
    Full,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Me, Stage::Mc, Stage::P1, Stage::Full];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Me => "ME",
            Stage::Mc => "MC",
            Stage::P1 => "P1",
            Stage::Full => "FULL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected ME, MC, P1 or FULL)")))
    }

    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::Me => None,
            Stage::Mc => Some(Stage::Me),
            Stage::P1 => Some(Stage::Mc),
            Stage::Full => Some(Stage::P1),
        }
    }

    /// Parameter groups updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        let any = |ps: &[&str]| ps.iter().any(|p| name.starts_with(p));
        match self {
            Stage::Me => any(&["flow."]),
            Stage::Mc => any(&["flow.", "mc.", "enc_m.", "dec_m.", "fact_m."]),
            Stage::P1 => !any(&["rpm_m.", "rpm_r."]),
            Stage::Full => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub batch: usize,
    pub seed: u64,
    /// Initial learning rate of every stage.
    pub lr: f64,
    /// Learning rate is divided by 10 at each plateau down to this value.
    pub lr_min: f64,
    /// Convergence window in steps.
    pub window: usize,
    /// Relative improvement between consecutive windows that counts as a
    /// plateau.
    pub tolerance: f64,
    pub min_steps: usize,
    /// Per-stage step cap.
    pub max_steps: usize,
    pub stages: Vec<Stage>,
    /// Allow a stage to start without its predecessor.
    pub from_scratch: bool,
    /// Parameter name prefixes to train instead of the stage's default set.
    pub trainable: Option<Vec<String>>,
    /// Global gradient-norm clip switched on after a divergence.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            batch: 4,
            seed: 7,
            lr: 1e-4,
            lr_min: 1e-6,
            window: 50,
            tolerance: 0.01,
            min_steps: 100,
            max_steps: 2000,
            stages: Stage::ALL.to_vec(),
            from_scratch: false,
            trainable: None,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &CodecModel) -> Result<()> {
        self.data.validate()?;
        if self.data.channels != model.config.channels {
            return Err(Error::Config(format!(
                "data has {} channels, model {}",
                self.data.channels, model.config.channels
            )));
        }
        crate::codec::check_frame_dims(model, self.data.size, self.data.size)?;
        if self.batch == 0 || self.window == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch, window and max_steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!("need 0 < lr_min <= lr, got {} and {}", self.lr_min, self.lr)));
        }
        Ok(())
    }
}

pub fn distortion<T: Real>(tape: &mut Tape<T>, kind: Distortion, target: Var, recon: Var) -> Result<Var> {
    match kind {
        Distortion::Mse => tape.mse(target, recon),
        Distortion::MsSsim => {
            let m = msssim_var(tape, target, recon)?;
            let n = tape.neg(m)?;
            tape.add_scalar(n, 1.0)
        }
    }
}

/// `D(f1, W(f0_hat, flow))`.
pub fn loss_me<T: Real>(tape: &mut Tape<T>, kind: Distortion, f0_hat: Var, f1: Var, flow: Var) -> Result<Var> {
    let warped = tape.warp(f0_hat, flow)?;
    distortion(tape, kind, f1, warped)
}

/// `lambda * D(f1, f1') + R(y_m)`, rate in bits per pixel.
pub fn loss_mc<T: Real>(tape: &mut Tape<T>, kind: Distortion, lambda: f64, f1: Var, f1_prime: Var, rate_m: Var) -> Result<Var> {
    let d = distortion(tape, kind, f1, f1_prime)?;
    let d = tape.mul_scalar(d, lambda)?;
    tape.add(d, rate_m)
}

/// `lambda * D(f1, f1_hat) + R(y_m) + R(y_r)`.
pub fn loss_p1<T: Real>(
    tape: &mut Tape<T>,
    kind: Distortion,
    lambda: f64,
    f1: Var,
    f1_hat: Var,
    rate_m: Var,
    rate_r: Var,
) -> Result<Var> {
    let l = loss_mc(tape, kind, lambda, f1, f1_hat, rate_m)?;
    tape.add(l, rate_r)
}

/// `lambda * sum_t D(f_t, f_t_hat) + sum_t (R(y_m_t) + R(y_r_t))`.
pub fn loss_full<T: Real>(
    tape: &mut Tape<T>,
    kind: Distortion,
    lambda: f64,
    frames: &[Var],
    recon: &[Var],
    rates: &[(Var, Var)],
) -> Result<Var> {
    if frames.is_empty() || frames.len() != recon.len() || frames.len() != rates.len() {
        return Err(Error::Config(format!(
            "loss_full needs matching non-empty inputs, got {}, {}, {}",
            frames.len(),
            recon.len(),
            rates.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&f, &r), &(rm, rr)) in frames.iter().zip(recon).zip(rates) {
        let l = loss_p1(tape, kind, lambda, f, r, rm, rr)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Forward pass of one stage on a batch of frames (one tensor per time
/// step, the first being the I-frame reconstruction). Returns the loss and
/// the mean rate (bpp) and distortion per P-frame.
pub fn stage_loss<T: Real>(
    model: &CodecModel,
    tape: &mut Tape<T>,
    p: &Bound,
    stage: Stage,
    frames: &[Tensor<T>],
    rng: &mut ChaCha8Rng,
) -> Result<(Var, f64, f64)> {
    let cfg = &model.config;
    let (kind, lambda) = (cfg.distortion, cfg.lambda());
    let (n, _, h, w) = frames[0].dims4()?;
    let per_pixel = 1.0 / (n * h * w) as f64;
    let reference = tape.constant(frames[0].clone());
    let current = tape.constant(frames[1].clone());
    if stage == Stage::Me {
        let flow = model.nets.flow.estimate(tape, p, reference, current)?;
        let l = loss_me(tape, kind, reference, current, flow)?;
        let d = tape.value(l).item().f64();
        return Ok((l, 0.0, d));
    }
    let steps = if stage == Stage::Full { frames.len() - 1 } else { 1 };
    let mut st = StepVars::default();
    let mut reference = reference;
    let (mut targets, mut recon, mut rates) = (Vec::new(), Vec::new(), Vec::new());
    let (mut rate_sum, mut dist_sum) = (0.0, 0.0);
    for t in 1..=steps {
        let cur = if t == 1 { current } else { tape.constant(frames[t].clone()) };
        let fv = model.p_frame(tape, p, reference, cur, &mut st, Quantization::Noise(rng))?;
        let rm = tape.mul_scalar(fv.bits_m, per_pixel)?;
        let rr = tape.mul_scalar(fv.bits_r, per_pixel)?;
        let out = if stage == Stage::Mc { fv.f_prime } else { fv.f_hat };
        let d = distortion(tape, kind, cur, out)?;
        dist_sum += tape.value(d).item().f64();
        rate_sum += tape.value(rm).item().f64();
        if stage != Stage::Mc {
            rate_sum += tape.value(rr).item().f64();
        }
        targets.push(cur);
        recon.push(out);
        rates.push((rm, rr));
        reference = fv.f_hat;
    }
    let loss = match stage {
        Stage::Mc => loss_mc(tape, kind, lambda, targets[0], recon[0], rates[0].0)?,
        Stage::P1 => loss_p1(tape, kind, lambda, targets[0], recon[0], rates[0].0, rates[0].1)?,
        _ => loss_full(tape, kind, lambda, &targets, &recon, &rates)?,
    };
    Ok((loss, rate_sum / steps as f64, dist_sum / steps as f64))
}

/// Adam with bias correction; constrained parameters are projected after
/// each step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.t += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = store.ids().position(|x| x == *id).expect("parameter id");
            let len = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; len]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; len]);
            let value = store.get_mut(*id).data_mut();
            for k in 0..len {
                let gk = g.data()[k].f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let upd = self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                value[k] = T::of(value[k].f64() - upd);
            }
        }
        store.project();
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.f64() * v.f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub rate_bpp: f64,
    pub distortion: f64,
}

pub fn write_log_csv<W: Write>(out: W, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub converged: bool,
    /// Mean loss over the last window.
    pub final_loss: f64,
    pub final_rate_bpp: f64,
    pub final_distortion: f64,
}

/// Relative improvement of the last window's mean over the one before.
fn window_improvement(xs: &[f64], window: usize) -> Option<f64> {
    if xs.len() < 2 * window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&xs[xs.len() - window..]);
    let before = mean(&xs[xs.len() - 2 * window..xs.len() - window]);
    Some((before - recent) / before.abs().max(1e-12))
}

pub struct Trainer {
    pub model: CodecModel,
    pub cfg: TrainConfig,
    pub log: Vec<LogRow>,
    pub completed: Vec<Stage>,
    data: SyntheticDataset,
    noise: ChaCha8Rng,
    adam: Adam,
    clip: Option<f64>,
    undo: Option<(ParamStore<f32>, Adam)>,
}

impl Trainer {
    /// `completed` lists stages already finished by the checkpoint `model`
    /// was loaded from.
    pub fn new(model: CodecModel, cfg: TrainConfig, completed: Vec<Stage>) -> Result<Self> {
        cfg.validate(&model)?;
        let data = SyntheticDataset::new(cfg.data.clone(), cfg.seed)?;
        let noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006e_6f69_7365);
        let adam = Adam::new(cfg.lr);
        Ok(Self {
            model,
            cfg,
            log: Vec::new(),
            completed,
            data,
            noise,
            adam,
            clip: None,
            undo: None,
        })
    }

    fn trainable(&self, stage: Stage) -> impl Fn(&str) -> bool + '_ {
        let use_rpm = self.model.config.use_rpm;
        move |name: &str| {
            if !use_rpm && (name.starts_with("rpm_m.") || name.starts_with("rpm_r.")) {
                return false;
            }
            match &self.cfg.trainable {
                Some(prefixes) => prefixes.iter().any(|p| name.starts_with(p.as_str())),
                None => stage.trains(name),
            }
        }
    }

    /// Frames of the next batch with the first replaced by its I-frame
    /// reconstruction.
    fn next_batch(&mut self) -> Result<Vec<Tensor<f32>>> {
        let mut frames = self.data.batch(self.cfg.batch);
        let first = &frames[0];
        let items = (0..self.cfg.batch)
            .map(|b| Ok(iframe::encode(&first.batch_item(b)?, self.model.config.iframe_levels)?.1))
            .collect::<Result<Vec<_>>>()?;
        frames[0] = Tensor::stack_batch(&items)?;
        Ok(frames)
    }

    fn attempt(&self, stage: Stage, frames: &[Tensor<f32>], rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64, Vec<(ParamId, Tensor<f32>)>)> {
        let mut tape = Tape::new();
        let trainable = self.trainable(stage);
        let p = self.model.store.bind_where(&mut tape, &trainable);
        let (loss, rate, dist) = stage_loss(&self.model, &mut tape, &p, stage, frames, rng)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let grads = tape.backward(loss)?;
        let out = self
            .model
            .store
            .ids()
            .filter(|&id| trainable(self.model.store.name(id)))
            .map(|id| (id, grads.get(p.get(id))))
            .collect::<Vec<_>>();
        if out.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite { op: "gradient" });
        }
        Ok((value, rate, dist, out))
    }

    /// One optimizer step. A non-finite loss or gradient undoes the
    /// previous update, turns on gradient clipping and retries the batch
    /// once; a second failure aborts.
    pub fn step(&mut self, stage: Stage) -> Result<LogRow> {
        let frames = self.next_batch()?;
        loop {
            let mut rng = self.noise.clone();
            match self.attempt(stage, &frames, &mut rng) {
                Ok((loss, rate_bpp, distortion, mut grads)) => {
                    self.noise = rng;
                    self.undo = Some((self.model.store.clone(), self.adam.clone()));
                    if let Some(c) = self.clip {
                        clip_global_norm(&mut grads, c);
                    }
                    self.adam.step(&mut self.model.store, &grads);
                    let row = LogRow {
                        step: self.log.len(),
                        stage,
                        loss,
                        rate_bpp,
                        distortion,
                    };
                    self.log.push(row.clone());
                    return Ok(row);
                }
                Err(Error::NonFinite { op }) if self.clip.is_none() => {
                    log::warn!(
                        "{} step {}: non-finite {op}; rolling back one update and clipping gradients at norm {}",
                        stage.label(),
                        self.log.len(),
                        self.cfg.clip_norm
                    );
                    if let Some((store, adam)) = self.undo.take() {
                        self.model.store = store;
                        self.adam = adam;
                    }
                    self.clip = Some(self.cfg.clip_norm);
                }
                Err(Error::NonFinite { op }) => {
                    return Err(Error::Diverged {
                        stage: stage.label().into(),
                        step: self.log.len(),
                        detail: format!("non-finite {op} with gradient clipping at {}", self.cfg.clip_norm),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageReport> {
        if let Some(prev) = stage.previous() {
            if !self.cfg.from_scratch && !self.completed.contains(&prev) {
                return Err(Error::Config(format!(
                    "stage {} needs a checkpoint that completed {} (or --from-scratch)",
                    stage.label(),
                    prev.label()
                )));
            }
        }
        self.adam = Adam::new(self.cfg.lr);
        self.undo = None;
        let start = self.log.len();
        let mut since_decay = start;
        let mut converged = false;
        let mut steps = 0;
        while steps < self.cfg.max_steps {
            self.step(stage)?;
            steps += 1;
            if steps < self.cfg.min_steps {
                continue;
            }
            let losses: Vec<f64> = self.log[since_decay..].iter().map(|r| r.loss).collect();
            match window_improvement(&losses, self.cfg.window) {
                Some(imp) if imp < self.cfg.tolerance => {
                    if self.adam.lr * 0.1 >= self.cfg.lr_min * (1.0 - 1e-9) {
                        self.adam.lr *= 0.1;
                        since_decay = self.log.len();
                        log::info!("{}: plateau at step {steps}, learning rate now {:e}", stage.label(), self.adam.lr);
                    } else {
                        converged = true;
                        break;
                    }
                }
                _ => {}
            }
        }
        if !self.completed.contains(&stage) {
            self.completed.push(stage);
        }
        let tail = &self.log[start.max(self.log.len().saturating_sub(self.cfg.window))..];
        let mean = |f: fn(&LogRow) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
        Ok(StageReport {
            stage,
            steps,
            converged,
            final_loss: mean(|r| r.loss),
            final_rate_bpp: mean(|r| r.rate_bpp),
            final_distortion: mean(|r| r.distortion),
        })
    }

    /// Run every configured stage in order.
    pub fn run(&mut self) -> Result<Vec<StageReport>> {
        let stages = self.cfg.stages.clone();
        stages.into_iter().map(|s| self.run_stage(s)).collect()
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            model: self.model.config.clone(),
            stages_completed: self.completed.iter().map(|s| s.label().to_string()).collect(),
            train: Some(serde_json::to_value(&self.cfg)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path, &self.meta()?)
    }
}

/// Stages recorded in a checkpoint's metadata.
pub fn completed_stages(meta: &CheckpointMeta) -> Result<Vec<Stage>> {
    meta.stages_completed.iter().map(|s| Stage::parse(s)).collect()
}
