//! The complete set of networks, their configuration and checkpoints.
//!
//! [`CodecModel::p_frame`] is the single definition of the P-frame data
//! flow. Training calls it with noisy latents on a differentiable tape;
//! the codec calls it with rounded latents, and the decoder replays only
//! its reconstruction half ([`CodecModel::reconstruct`]) from bitstream
//! symbols.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::LstmVars;
use crate::motion::{FlowPyramidNet, McNet};
use crate::rae::{add_quantization_noise, Latent, LatentKind, RaeDecoder, RaeEncoder};
use crate::rpm::{FactorizedModel, PmfVars, RpmNet};
use crate::tensor::{read_weights, Bound, ParamBuilder, ParamStore, Real, Tape, Tensor, Var};

pub const MSE_LAMBDAS: [f64; 4] = [256.0, 512.0, 1024.0, 2048.0];
pub const MSSSIM_LAMBDAS: [f64; 4] = [8.0, 16.0, 32.0, 64.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distortion {
    Mse,
    MsSsim,
}

/// The three ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No recurrent cells, factorized entropy model.
    Bl,
    /// Recurrent auto-encoders, factorized entropy model.
    BlRae,
    /// Recurrent auto-encoders and recurrent probability models.
    Full,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Bl => "BL",
            Variant::BlRae => "BL+RAE",
            Variant::Full => "BL+RAE+RPM",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Frame channels: 1 (gray) or 3.
    pub channels: usize,
    /// Filters per layer.
    pub width: usize,
    /// Latent channels per stream.
    pub latent_channels: usize,
    pub flow_levels: usize,
    pub recurrent_ae: bool,
    pub use_rpm: bool,
    pub distortion: Distortion,
    /// Index into the lambda grid of the distortion kind.
    pub lambda_id: u8,
    /// I-frame quantization levels (2..=256).
    pub iframe_levels: u16,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            width: 32,
            latent_channels: 32,
            flow_levels: 3,
            recurrent_ae: true,
            use_rpm: true,
            distortion: Distortion::Mse,
            lambda_id: 2,
            iframe_levels: 64,
        }
    }
}

impl ModelConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            latent_channels: width,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.recurrent_ae = v != Variant::Bl;
        self.use_rpm = v == Variant::Full;
        self
    }

    pub fn variant(&self) -> Variant {
        match (self.recurrent_ae, self.use_rpm) {
            (false, _) => Variant::Bl,
            (true, false) => Variant::BlRae,
            (true, true) => Variant::Full,
        }
    }

    pub fn lambda(&self) -> f64 {
        let grid = match self.distortion {
            Distortion::Mse => &MSE_LAMBDAS,
            Distortion::MsSsim => &MSSSIM_LAMBDAS,
        };
        grid[self.lambda_id as usize % grid.len()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.width == 0 || self.latent_channels == 0 {
            return bad("width and latent_channels must be positive".into());
        }
        if !(1..=5).contains(&self.flow_levels) {
            return bad(format!("flow_levels must be in 1..=5, got {}", self.flow_levels));
        }
        if self.lambda_id > 3 {
            return bad(format!("lambda_id must be in 0..=3, got {}", self.lambda_id));
        }
        if !(2..=256).contains(&self.iframe_levels) {
            return bad(format!("iframe_levels must be in 2..=256, got {}", self.iframe_levels));
        }
        if self.use_rpm && !self.recurrent_ae {
            return bad("the recurrent probability model requires recurrent auto-encoders".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Nets {
    pub flow: FlowPyramidNet,
    pub mc: McNet,
    pub enc_m: RaeEncoder,
    pub dec_m: RaeDecoder,
    pub enc_r: RaeEncoder,
    pub dec_r: RaeDecoder,
    pub rpm_m: RpmNet,
    pub rpm_r: RpmNet,
    pub fact_m: FactorizedModel,
    pub fact_r: FactorizedModel,
}

/// Prefixes of the parameter groups.
pub mod groups {
    pub const FLOW: &str = "flow.";
    pub const MC: &str = "mc.";
    pub const RAE_M: [&str; 2] = ["enc_m.", "dec_m."];
    pub const RAE_R: [&str; 2] = ["enc_r.", "dec_r."];
    pub const RPM: [&str; 2] = ["rpm_m.", "rpm_r."];
    pub const FACTORIZED: [&str; 2] = ["fact_m.", "fact_r."];
}

impl Nets {
    fn build<T: Real, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let mut pb = ParamBuilder::new(store, rng);
        let (c, w, l, rec) = (cfg.channels, cfg.width, cfg.latent_channels, cfg.recurrent_ae);
        Self {
            flow: FlowPyramidNet::new(&mut pb, "flow", c, w, cfg.flow_levels),
            mc: McNet::new(&mut pb, "mc", c, w),
            enc_m: RaeEncoder::new(&mut pb, "enc_m", 2, w, l, 3, rec),
            dec_m: RaeDecoder::new(&mut pb, "dec_m", l, w, 2, 3, rec),
            enc_r: RaeEncoder::new(&mut pb, "enc_r", c, w, l, 5, rec),
            dec_r: RaeDecoder::new(&mut pb, "dec_r", l, w, c, 5, rec),
            rpm_m: RpmNet::new(&mut pb, "rpm_m", l, w),
            rpm_r: RpmNet::new(&mut pb, "rpm_r", l, w),
            fact_m: FactorizedModel::new(&mut pb, "fact_m", l),
            fact_r: FactorizedModel::new(&mut pb, "fact_r", l),
        }
    }
}

/// How continuous encoder outputs become latents.
pub enum Quantization<'a> {
    /// Additive uniform noise (training).
    Noise(&'a mut ChaCha8Rng),
    /// Round half away from zero and clamp (coding).
    Round,
}

/// Recurrent quantities carried between frames, as tape values.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepVars {
    pub enc_m: Option<LstmVars>,
    pub dec_m: Option<LstmVars>,
    pub enc_r: Option<LstmVars>,
    pub dec_r: Option<LstmVars>,
    pub rpm_m: Option<LstmVars>,
    pub rpm_r: Option<LstmVars>,
    /// Latents of the previous P-frame since the last I-frame.
    pub prev_y_m: Option<Var>,
    pub prev_y_r: Option<Var>,
}

impl StepVars {
    /// Zero every ConvLSTM state; previous latents are kept.
    pub fn reset_cells(&mut self) {
        self.enc_m = None;
        self.dec_m = None;
        self.enc_r = None;
        self.dec_r = None;
        self.rpm_m = None;
        self.rpm_r = None;
    }
}

/// Everything one P-frame step produces on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub flow: Var,
    pub y_m: Var,
    pub y_r: Var,
    pub flow_hat: Var,
    pub f_prime: Var,
    pub f_hat: Var,
    pub pmf_m: PmfVars,
    pub pmf_r: PmfVars,
    /// Total bits of each stream under the continuous PMF.
    pub bits_m: Var,
    pub bits_r: Var,
}

/// Decoder-side output of [`CodecModel::reconstruct`].
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub flow_hat: Var,
    pub f_prime: Var,
    pub f_hat: Var,
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub nets: Nets,
}

impl CodecModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = Nets::build(&config, &mut store, &mut rng);
        Ok(Self { config, store, nets })
    }

    /// 64-bit digest of the serialized weights.
    pub fn hash(&self) -> u64 {
        weights_hash(&self.store.to_bytes())
    }

    pub fn bind(&self, tape: &mut Tape<f32>) -> Bound {
        self.store.bind_frozen(tape)
    }

    /// Continuous PMF parameters for the latents of the current frame.
    /// Without a previous latent (first P-frame after an I-frame) or
    /// without the recurrent model, the factorized model is used.
    pub fn pmf<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        kind: LatentKind,
        prev: Option<Var>,
        state: Option<LstmVars>,
        shape: &[usize],
    ) -> Result<(PmfVars, Option<LstmVars>)> {
        let (rpm, fact) = match kind {
            LatentKind::Motion => (&self.nets.rpm_m, &self.nets.fact_m),
            LatentKind::Residual => (&self.nets.rpm_r, &self.nets.fact_r),
        };
        match prev {
            Some(y) if self.config.use_rpm => {
                let (pm, st) = rpm.step(tape, p, y, state)?;
                Ok((pm, Some(st)))
            }
            _ => Ok((fact.params(tape, p, shape)?, None)),
        }
    }

    /// Decoder half of a P-frame from (noisy or integer) latents.
    pub fn reconstruct<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        reference: Var,
        y_m: Var,
        y_r: Var,
        st: &mut StepVars,
    ) -> Result<Reconstruction> {
        let (flow_hat, f_prime) = self.reconstruct_motion(tape, p, reference, y_m, st)?;
        let f_hat = self.reconstruct_residual(tape, p, f_prime, y_r, st)?;
        Ok(Reconstruction { flow_hat, f_prime, f_hat })
    }

    fn reconstruct_motion<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        reference: Var,
        y_m: Var,
        st: &mut StepVars,
    ) -> Result<(Var, Var)> {
        let (flow_hat, s) = self.nets.dec_m.forward(tape, p, y_m, st.dec_m)?;
        st.dec_m = s;
        let f_prime = self.nets.mc.compensate(tape, p, reference, flow_hat)?;
        Ok((flow_hat, f_prime))
    }

    fn reconstruct_residual<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        f_prime: Var,
        y_r: Var,
        st: &mut StepVars,
    ) -> Result<Var> {
        let (x_r, s) = self.nets.dec_r.forward(tape, p, y_r, st.dec_r)?;
        st.dec_r = s;
        let sum = tape.add(f_prime, x_r)?;
        tape.clamp(sum, 0.0, 1.0)
    }

    fn quantize<T: Real>(
        tape: &mut Tape<T>,
        y: Var,
        q: &mut Quantization,
        kind: LatentKind,
    ) -> Result<Var> {
        match q {
            Quantization::Noise(rng) => add_quantization_noise(tape, y, *rng),
            Quantization::Round => {
                let lat = Latent::quantize(tape.value(y), kind, 0)?;
                Ok(tape.constant(lat.to_tensor()))
            }
        }
    }

    /// One P-frame: flow, motion AE, compensation, residual AE, and the
    /// PMFs of both latent streams. `st` is advanced in place.
    pub fn p_frame<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        reference: Var,
        current: Var,
        st: &mut StepVars,
        mut q: Quantization,
    ) -> Result<FrameVars> {
        let flow = self.nets.flow.estimate(tape, p, reference, current)?;
        let (ym_c, s) = self.nets.enc_m.forward(tape, p, flow, st.enc_m)?;
        st.enc_m = s;
        let y_m = Self::quantize(tape, ym_c, &mut q, LatentKind::Motion)?;
        let shape = tape.shape(y_m).to_vec();
        let (pmf_m, s) = self.pmf(tape, p, LatentKind::Motion, st.prev_y_m, st.rpm_m, &shape)?;
        st.rpm_m = s;
        let (flow_hat, f_prime) = self.reconstruct_motion(tape, p, reference, y_m, st)?;

        let residual = tape.sub(current, f_prime)?;
        let (yr_c, s) = self.nets.enc_r.forward(tape, p, residual, st.enc_r)?;
        st.enc_r = s;
        let y_r = Self::quantize(tape, yr_c, &mut q, LatentKind::Residual)?;
        let (pmf_r, s) = self.pmf(tape, p, LatentKind::Residual, st.prev_y_r, st.rpm_r, &shape)?;
        st.rpm_r = s;
        let f_hat = self.reconstruct_residual(tape, p, f_prime, y_r, st)?;

        let bm = pmf_m.bits(tape, y_m)?;
        let bits_m = tape.sum(bm)?;
        let br = pmf_r.bits(tape, y_r)?;
        let bits_r = tape.sum(br)?;
        st.prev_y_m = Some(y_m);
        st.prev_y_r = Some(y_r);
        Ok(FrameVars {
            flow,
            y_m,
            y_r,
            flow_hat,
            f_prime,
            f_hat,
            pmf_m,
            pmf_r,
            bits_m,
            bits_r,
        })
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.store.to_bytes())?;
        let mut meta = meta.clone();
        meta.model = self.config.clone();
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        let named = read_weights(&bytes[..])?;
        let mut model = Self::new(meta.model.clone(), 0)?;
        if named.len() != model.store.len() {
            return Err(Error::Format {
                what: "weights",
                detail: format!("{} parameters, model expects {}", named.len(), model.store.len()),
            });
        }
        model.store.load_from(&named)?;
        Ok((model, meta))
    }
}

pub fn weights_hash(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

/// JSON stored next to a weight file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Training stages completed, in order.
    pub stages_completed: Vec<String>,
    pub train: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Tensor of one frame stored in a model-independent layout.
pub fn frame_tensor(data: &[f32], channels: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    Tensor::new(vec![1, channels, h, w], data.to_vec())
}
