//! The complete model: prior provider, codec transforms, entropy model and
//! denoiser sharing one parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::diffusion::{make_schedule, Denoiser, DiffusionConfig, NoiseSchedule};
use crate::entropy::{factorized_bits, quantize, rate_estimate, slice_layout, GaussianParams, QuantMode, SliceContext, FACTORIZED_BINS};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamStore};
use crate::prior::{PriorConfig, PriorFeatures, PriorProvider};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::{pad_replicate, CodecConfig, Transforms};

pub const PRIOR_PREFIX: &str = "prior.";
pub const CODEC_PREFIX: &str = "codec.";
pub const DENOISER_PREFIX: &str = "denoiser.";
pub const LOGITS: &str = "codec.factorized.logits";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub prior: PriorConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig { codec: CodecConfig::toy(), prior: PriorConfig::toy(), diffusion: DiffusionConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.prior.channels != self.codec.prior_channels || self.prior.content_channels != self.codec.content_channels {
            return Err(Error::Config("prior and codec disagree on feature or content channels".into()));
        }
        make_schedule(self.diffusion.train_steps, self.diffusion.beta_start, self.diffusion.beta_end)?;
        if self.diffusion.width == 0 || self.diffusion.time_dim < 2 || self.diffusion.sample_steps == 0 {
            return Err(Error::Config("diffusion width, embedding size and sampler steps must be positive".into()));
        }
        if !(self.diffusion.clip_latent >= 0.0 && self.diffusion.clip_latent.is_finite()) {
            return Err(Error::Config("sampler clip must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Hash of the architecture, written into checkpoints.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&json);
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// How latents are quantized in a codec pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    /// Noisy latents for the rate, straight-through rounding for the decoder path.
    Train,
    /// Rounding everywhere, as in the coder.
    Eval,
    /// Additive noise on every path; smooth in all parameters.
    Relaxed,
}

/// Result of one differentiable pass through the codec.
pub struct CodecPass<'t, T: Scalar> {
    pub bits_y: Var<'t, T>,
    pub bits_z: Var<'t, T>,
    /// Cross-entropy of the rounded latents under the same parameters.
    pub coded_bits: f64,
    pub y_hat: Var<'t, T>,
    pub z_c: Var<'t, T>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub prior: PriorProvider<T>,
    pub transforms: Transforms,
    pub context: SliceContext,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut params, rng: &mut rng };
        let prior = PriorProvider::new(&mut init, "prior", cfg.prior);
        let transforms = Transforms::new(&mut init, "codec", cfg.codec)?;
        let context = SliceContext::new(&mut init, "codec.context", slice_layout(cfg.codec.latent_channels)?, cfg.codec.latent_channels);
        let hc = cfg.codec.hyper_channels;
        let logits = Tensor::from_fn(&[hc, FACTORIZED_BINS], |i| {
            let k = (i % FACTORIZED_BINS) as f64 - (FACTORIZED_BINS / 2) as f64;
            T::from_f64c(-0.5 * (k / 4.0).powi(2))
        });
        init.store.insert(LOGITS, logits);
        let denoiser = Denoiser::new(&mut init, "denoiser", cfg.diffusion, cfg.codec.content_channels);
        let d = cfg.diffusion;
        let schedule = make_schedule(d.train_steps, d.beta_start, d.beta_end)?;
        Ok(Model { cfg, params, prior, transforms, context, denoiser, schedule })
    }

    /// Hash of the architecture and every parameter value.
    pub fn model_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        for (name, t) in self.params.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_f64c().to_le_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }

    /// Replicate-pads an image to the codec grid.
    pub fn pad(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 3 || x.shape()[0] != 3 {
            return Err(Error::Input(format!("expected a [3, H, W] image, got {:?}", x.shape())));
        }
        let (_, h, w) = x.dims3();
        let df = self.cfg.codec.down_factor;
        if h < df || w < df {
            return Err(Error::Input(format!("image {h}x{w} is smaller than the down factor {df}")));
        }
        let (ph, pw) = self.cfg.codec.padded_dims(h, w);
        Ok(if (ph, pw) == (h, w) { x.clone() } else { pad_replicate(x, ph, pw) })
    }

    pub fn extract_prior(&self, x_padded: &Tensor<T>) -> Result<PriorFeatures<T>> {
        self.prior.extract_prior(&self.params, x_padded, self.cfg.codec.stages())
    }

    pub fn content_target(&self, x_padded: &Tensor<T>) -> Result<Tensor<T>> {
        self.prior.content_target(&self.params, x_padded, self.cfg.codec.stages())
    }

    /// Analysis, hyper path and slice-wise entropy model on a padded image.
    pub fn codec_pass<'t, R: Rng>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &Tensor<T>,
        prior: &PriorFeatures<T>,
        mode: PassMode,
        rng: &mut R,
    ) -> Result<CodecPass<'t, T>> {
        let tf = &self.transforms;
        let levels: Vec<Var<'t, T>> = prior.levels.iter().map(|l| ctx.constant(l.clone())).collect();
        let coarsest = *levels.last().ok_or_else(|| Error::Contract("empty prior features".into()))?;
        let y = tf.analysis(ctx, ctx.constant(x.clone()), &levels)?;
        let z = tf.hyper_encode(ctx, y, coarsest)?;
        let (z_hat, z_rate) = match mode {
            PassMode::Train => (z.quantize(QuantMode::Ste, None, rng), z.quantize(QuantMode::Noise, None, rng)),
            PassMode::Eval => {
                let q = z.quantize(QuantMode::Ste, None, rng);
                (q, q)
            }
            PassMode::Relaxed => {
                let q = z.quantize(QuantMode::Noise, None, rng);
                (q, q)
            }
        };
        let logits = ctx.param(LOGITS);
        let bits_z = z_rate.factorized_bits(logits);
        let mut coded_bits = factorized_bits(&z.value().map(|v| v.round()), &logits.value());

        let (_, lh, lw) = y.dims3();
        let hyper = tf.hyper_decode(ctx, z_hat, (lh, lw))?;
        let w = tf.hyper_decode_w(ctx, z_hat, (lh, lw))?;
        let layout = self.context.layout();
        let mut decoded = Vec::with_capacity(layout.len());
        let mut bits_y: Option<Var<'t, T>> = None;
        for i in 0..layout.len() {
            let p = self.context.params(ctx, hyper, &decoded, i)?;
            let yi = y.narrow_channels(layout.start(i), layout.sizes()[i]);
            let (y_hat, y_rate) = match mode {
                PassMode::Train => (yi.quantize(QuantMode::Ste, Some(p.mu), rng), yi.quantize(QuantMode::Noise, Some(p.mu), rng)),
                PassMode::Eval => {
                    let q = yi.quantize(QuantMode::Ste, Some(p.mu), rng);
                    (q, q)
                }
                PassMode::Relaxed => {
                    let q = yi.quantize(QuantMode::Noise, Some(p.mu), rng);
                    (q, q)
                }
            };
            let b = y_rate.gaussian_bits(p.mu, p.sigma);
            bits_y = Some(match bits_y {
                Some(acc) => acc.add(b),
                None => b,
            });
            let gp = GaussianParams::new((*p.mu.value()).clone(), (*p.sigma.value()).clone())?;
            coded_bits += rate_estimate(&quantize(&yi.value(), QuantMode::Round, Some(&p.mu.value()), rng), &gp);
            decoded.push(y_hat);
        }
        let y_hat = Var::concat_channels(&decoded);
        let z_c = tf.synthesis(ctx, y_hat, w)?;
        Ok(CodecPass { bits_y: bits_y.expect("ten slices"), bits_z, coded_bits, y_hat, z_c })
    }
}

/// Small architecture for fast tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    use crate::ffab::FfabConfig;
    ModelConfig {
        codec: CodecConfig {
            base_channels: 8,
            latent_channels: 24,
            hyper_channels: 4,
            down_factor: 8,
            ffab: FfabConfig { channels: 8, num_heads: 4, window_base: 2, fft_block: 4 },
            stage_depth: 1,
            prior_channels: 4,
            content_channels: 4,
        },
        prior: PriorConfig { channels: 4, content_channels: 4, decoder_width: 8, ..PriorConfig::fixed() },
        diffusion: DiffusionConfig { width: 8, time_dim: 8, sample_steps: 4, ..DiffusionConfig::default() },
    }
}
