//! Analysis, hyper and synthesis transforms of the codec.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::entropy::slice_layout;
use crate::error::{contract, Error, Result};
use crate::ffab::{FfabConfig, FfabStage, Iaf};
use crate::nn::{Conv, Ctx, Init, UpConv};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Content maps sit at this fraction of the image resolution.
pub const CONTENT_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub down_factor: usize,
    pub ffab: FfabConfig,
    pub stage_depth: usize,
    /// Channels of each prior feature level.
    pub prior_channels: usize,
    /// Channels of the content representation.
    pub content_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl CodecConfig {
    pub fn toy() -> Self {
        CodecConfig {
            base_channels: 32,
            latent_channels: 48,
            hyper_channels: 32,
            down_factor: 8,
            ffab: FfabConfig { channels: 32, num_heads: 8, window_base: 2, fft_block: 8 },
            stage_depth: 2,
            prior_channels: 16,
            content_channels: 16,
        }
    }

    pub fn full() -> Self {
        CodecConfig {
            base_channels: 128,
            latent_channels: 192,
            hyper_channels: 128,
            down_factor: 16,
            ffab: FfabConfig { channels: 128, num_heads: 8, window_base: 4, fft_block: 8 },
            stage_depth: 2,
            prior_channels: 16,
            content_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        slice_layout(self.latent_channels)?;
        if !self.down_factor.is_power_of_two() || self.down_factor < 2 * CONTENT_STRIDE {
            return Err(Error::Config(format!("down factor {} must be a power of two ≥ {}", self.down_factor, 2 * CONTENT_STRIDE)));
        }
        if self.down_factor > 255 {
            return Err(Error::Config("down factor does not fit the bitstream header".into()));
        }
        if self.stage_depth == 0 {
            return Err(Error::Config("stage depth must be positive".into()));
        }
        for ch in [self.base_channels, self.latent_channels] {
            self.ffab.with_channels(ch).validate()?;
        }
        if self.hyper_channels == 0 || self.prior_channels == 0 || self.content_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Number of stride-2 stages of the analysis transform.
    pub fn stages(&self) -> usize {
        self.down_factor.trailing_zeros() as usize
    }

    /// Side lengths after replicate padding to a multiple of the down factor.
    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let df = self.down_factor;
        (h.div_ceil(df) * df, w.div_ceil(df) * df)
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.padded_dims(h, w);
        (ph / self.down_factor, pw / self.down_factor)
    }

    pub fn hyper_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (lh, lw) = self.latent_dims(h, w);
        (lh.div_ceil(4), lw.div_ceil(4))
    }

    pub fn content_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.padded_dims(h, w);
        (ph / CONTENT_STRIDE, pw / CONTENT_STRIDE)
    }

    /// Spatial size of analysis stage `i` (zero-based) for a padded input.
    pub fn stage_dims(&self, h: usize, w: usize, i: usize) -> (usize, usize) {
        let (ph, pw) = self.padded_dims(h, w);
        (ph >> (i + 1), pw >> (i + 1))
    }
}

/// Replicate-pads an image on the bottom and right to `(th, tw)`.
pub fn pad_replicate<T: Scalar>(x: &Tensor<T>, th: usize, tw: usize) -> Tensor<T> {
    let tape = Tape::inference();
    (*tape.constant(x.clone()).replicate_pad(th, tw).value()).clone()
}

#[derive(Debug, Clone)]
struct AnalysisStage {
    down: Conv,
    ffab: FfabStage,
    iaf: Iaf,
}

#[derive(Debug, Clone)]
struct HyperDecoder {
    up1: UpConv,
    up2: UpConv,
}

impl HyperDecoder {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, hc: usize, m: usize) -> Self {
        HyperDecoder { up1: UpConv::new(init, &format!("{name}.up1"), hc, hc), up2: UpConv::new(init, &format!("{name}.up2"), hc, m) }
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, z: Var<'t, T>, latent_hw: (usize, usize)) -> Result<Var<'t, T>> {
        let (_, zh, zw) = z.dims3();
        if zh * 4 < latent_hw.0 || zw * 4 < latent_hw.1 {
            return Err(contract(format!("hyper latent {zh}x{zw} too small for latent {}x{}", latent_hw.0, latent_hw.1)));
        }
        let h = self.up1.forward(ctx, z).gelu();
        Ok(self.up2.forward(ctx, h).crop(latent_hw.0, latent_hw.1))
    }
}

/// All nonlinear mappings of the codec.
#[derive(Debug, Clone)]
pub struct Transforms {
    pub cfg: CodecConfig,
    analysis: Vec<AnalysisStage>,
    hyper_iaf: Iaf,
    hyper_down: [Conv; 2],
    hyper_s: HyperDecoder,
    hyper_w: HyperDecoder,
    synth_in: Conv,
    synth_iaf: Iaf,
    synth_stages: Vec<FfabStage>,
    synth_ups: Vec<UpConv>,
    synth_out: Conv,
}

impl Transforms {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, m, hc, pc) = (cfg.base_channels, cfg.latent_channels, cfg.hyper_channels, cfg.prior_channels);
        let stages = cfg.stages();
        let mut analysis = Vec::with_capacity(stages);
        let mut cin = 3;
        for i in 0..stages {
            let cout = if i + 1 == stages { m } else { n };
            let p = format!("{name}.analysis.{i}");
            analysis.push(AnalysisStage {
                down: Conv::new(init, &format!("{p}.down"), cin, cout, 5, 2),
                ffab: FfabStage::new(init, &format!("{p}.ffab"), cfg.ffab.with_channels(cout), cfg.stage_depth)?,
                iaf: Iaf::new(init, &format!("{p}.iaf"), pc, cout),
            });
            cin = cout;
        }
        let hyper_iaf = Iaf::new(init, &format!("{name}.hyper_a.iaf"), pc, m);
        let hyper_down = [
            Conv::new(init, &format!("{name}.hyper_a.down1"), m, hc, 5, 2),
            Conv::new(init, &format!("{name}.hyper_a.down2"), hc, hc, 5, 2),
        ];
        let hyper_s = HyperDecoder::new(init, &format!("{name}.hyper_s"), hc, m);
        let hyper_w = HyperDecoder::new(init, &format!("{name}.hyper_w"), hc, m);
        let synth_in = Conv::new(init, &format!("{name}.synth.in"), m, n, 1, 1);
        let synth_iaf = Iaf::new(init, &format!("{name}.synth.iaf"), m, n);
        let ups = stages - CONTENT_STRIDE.trailing_zeros() as usize;
        let mut synth_stages = Vec::with_capacity(ups + 1);
        let mut synth_ups = Vec::with_capacity(ups);
        for i in 0..=ups {
            if i > 0 {
                synth_ups.push(UpConv::new(init, &format!("{name}.synth.up{i}"), n, n));
            }
            synth_stages.push(FfabStage::new(init, &format!("{name}.synth.{i}"), cfg.ffab.with_channels(n), cfg.stage_depth)?);
        }
        let synth_out = Conv::new(init, &format!("{name}.synth.out"), n, cfg.content_channels, 3, 1);
        Ok(Transforms { cfg, analysis, hyper_iaf, hyper_down, hyper_s, hyper_w, synth_in, synth_iaf, synth_stages, synth_ups, synth_out })
    }

    /// Image `[3, H, W]` with prior levels (finest first) to the latent `y`.
    ///
    /// The image is replicate-padded to a multiple of the down factor first; prior
    /// levels must match the padded stage sizes.
    pub fn analysis<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, prior: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let (c, h, w) = x.dims3();
        let df = self.cfg.down_factor;
        if c != 3 {
            return Err(Error::Input(format!("expected a 3-channel image, got {c}")));
        }
        if h < df || w < df {
            return Err(Error::Input(format!("image {h}x{w} is smaller than the down factor {df}")));
        }
        if prior.len() < self.analysis.len() {
            return Err(contract(format!("{} prior levels supplied, {} needed", prior.len(), self.analysis.len())));
        }
        let (ph, pw) = self.cfg.padded_dims(h, w);
        let mut f = if (ph, pw) == (h, w) { x } else { x.replicate_pad(ph, pw) }.add_scalar(-0.5);
        for (stage, level) in self.analysis.iter().zip(prior) {
            f = stage.down.forward(ctx, f);
            f = stage.ffab.forward(ctx, f)?;
            f = stage.iaf.inject(ctx, f, *level)?;
        }
        Ok(f)
    }

    /// Latent to hyper latent `z`, with one injection from the coarsest prior level.
    pub fn hyper_encode<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, y: Var<'t, T>, coarsest: Var<'t, T>) -> Result<Var<'t, T>> {
        let f = self.hyper_iaf.inject(ctx, y, coarsest)?;
        let f = self.hyper_down[0].forward(ctx, f).gelu();
        Ok(self.hyper_down[1].forward(ctx, f))
    }

    /// Hyper features at latent resolution, the conditioning of every slice.
    pub fn hyper_decode<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, z: Var<'t, T>, latent_hw: (usize, usize)) -> Result<Var<'t, T>> {
        self.hyper_s.forward(ctx, z, latent_hw)
    }

    /// Same architecture as [`Transforms::hyper_decode`] with its own weights; feeds synthesis.
    pub fn hyper_decode_w<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, z: Var<'t, T>, latent_hw: (usize, usize)) -> Result<Var<'t, T>> {
        self.hyper_w.forward(ctx, z, latent_hw)
    }

    /// Quantized latent and synthesis conditioning to the content representation.
    pub fn synthesis<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, y: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let (m, h, wd) = y.dims3();
        if m != self.cfg.latent_channels {
            return Err(contract(format!("latent has {m} channels, expected {}", self.cfg.latent_channels)));
        }
        if w.dims3() != (m, h, wd) {
            return Err(contract(format!("conditioning {:?} does not match latent {:?}", w.shape(), y.shape())));
        }
        let mut f = self.synth_in.forward(ctx, y);
        f = self.synth_iaf.inject(ctx, f, w)?;
        f = self.synth_stages[0].forward(ctx, f)?;
        for (up, stage) in self.synth_ups.iter().zip(&self.synth_stages[1..]) {
            f = up.forward(ctx, f).gelu();
            f = stage.forward(ctx, f)?;
        }
        Ok(self.synth_out.forward(ctx, f))
    }
}
