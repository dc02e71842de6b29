//! Frequency-band-aware attention block and the prior-injection affine transform.
//!
//! A block splits its `K` heads into four equal groups. Each group attends inside
//! a differently shaped window so that it is biased toward one band:
//!
//! | group | band | window        |
//! |-------|------|---------------|
//! | 1     | LL   | `2s × 2s`     |
//! | 2     | HH   | `s/2 × s/2`   |
//! | 3     | HL   | `2s × s/2`    |
//! | 4     | LH   | `s/2 × 2s`    |
//!
//! The feed-forward half modulates its output blockwise in the frequency domain
//! with a learnable gain per bin.

mod attention;
mod freqmod;

use serde::{Deserialize, Serialize};

pub use attention::{attention_weights, bias_len, AttnLayout};
pub use freqmod::filter_blocks_complex;

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::nn::{BandProbe, ChannelNorm, Conv, Ctx, Init, ParamStore};
use crate::numerics::WindowSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    LL,
    HH,
    HL,
    LH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::HH, Band::HL, Band::LH];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Band::LL => "LL",
            Band::HH => "HH",
            Band::HL => "HL",
            Band::LH => "LH",
        }
    }

    /// Band of zero-based head `head` out of `heads` (a multiple of four).
    pub fn of_head(head: usize, heads: usize) -> Band {
        assert!(head < heads && heads.is_multiple_of(4));
        Band::ALL[head / (heads / 4)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfabConfig {
    pub channels: usize,
    pub num_heads: usize,
    pub window_base: usize,
    pub fft_block: usize,
}

impl Default for FfabConfig {
    fn default() -> Self {
        FfabConfig { channels: 32, num_heads: 8, window_base: 2, fft_block: 8 }
    }
}

impl FfabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.num_heads.is_multiple_of(4) {
            return Err(Error::Config(format!("head count {} must be a positive multiple of 4", self.num_heads)));
        }
        if self.window_base < 2 || !self.window_base.is_multiple_of(2) {
            return Err(Error::Config(format!("window base {} must be a positive even integer", self.window_base)));
        }
        if self.fft_block == 0 {
            return Err(Error::Config("fft block must be positive".into()));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("channels {} not divisible by {} heads", self.channels, self.num_heads)));
        }
        Ok(())
    }

    pub fn with_channels(self, channels: usize) -> Self {
        FfabConfig { channels, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandShapes {
    pub ll: WindowSpec,
    pub hh: WindowSpec,
    pub hl: WindowSpec,
    pub lh: WindowSpec,
}

impl BandShapes {
    pub fn get(&self, band: Band) -> WindowSpec {
        match band {
            Band::LL => self.ll,
            Band::HH => self.hh,
            Band::HL => self.hl,
            Band::LH => self.lh,
        }
    }
}

pub fn band_shapes(cfg: &FfabConfig) -> Result<BandShapes> {
    if cfg.num_heads == 0 || !cfg.num_heads.is_multiple_of(4) {
        return Err(Error::Config(format!("head count {} must be a positive multiple of 4", cfg.num_heads)));
    }
    let s = cfg.window_base;
    if s < 2 || !s.is_multiple_of(2) {
        return Err(Error::Config(format!("window base {s} must be a positive even integer")));
    }
    let (big, small) = (2 * s, s / 2);
    Ok(BandShapes {
        ll: WindowSpec::new(big, big)?,
        hh: WindowSpec::new(small, small)?,
        hl: WindowSpec::new(big, small)?,
        lh: WindowSpec::new(small, big)?,
    })
}

/// One residual block: `f + attn(norm f) + ffn_mod(norm(f + attn(norm f)))`.
#[derive(Debug, Clone)]
pub struct FfabBlock {
    pub name: String,
    pub cfg: FfabConfig,
    bands: BandShapes,
    norm1: ChannelNorm,
    qkv: Conv,
    proj: Conv,
    norm2: ChannelNorm,
    ffn1: Conv,
    ffn2: Conv,
}

impl FfabBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: FfabConfig) -> Result<Self> {
        cfg.validate()?;
        let bands = band_shapes(&cfg)?;
        let c = cfg.channels;
        let norm1 = ChannelNorm::new(init, &format!("{name}.norm1"), c);
        let qkv = Conv::new(init, &format!("{name}.qkv"), c, 3 * c, 1, 1);
        for band in Band::ALL {
            let w = bands.get(band);
            init.normal(format!("{name}.bias.{}", band.label()), &[cfg.num_heads / 4, bias_len(w)], 0.02);
        }
        let proj = Conv::with_gain(init, &format!("{name}.proj"), c, c, 1, 1, 0.5);
        let norm2 = ChannelNorm::new(init, &format!("{name}.norm2"), c);
        let ffn1 = Conv::new(init, &format!("{name}.ffn1"), c, 2 * c, 1, 1);
        let ffn2 = Conv::with_gain(init, &format!("{name}.ffn2"), 2 * c, c, 1, 1, 0.5);
        init.constant(format!("{name}.filter"), &[4, cfg.fft_block, cfg.fft_block], 1.0);
        Ok(FfabBlock { name: name.to_string(), cfg, bands, norm1, qkv, proj, norm2, ffn1, ffn2 })
    }

    pub fn bands(&self) -> BandShapes {
        self.bands
    }

    /// Zeroes the output projection and the last FFN layer so the branch outputs exactly 0.
    pub fn zero_branch<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for conv in [&self.proj, &self.ffn2] {
            for suffix in ["w", "b"] {
                let t = store.get_mut(&format!("{}.{suffix}", conv.name)).expect("block parameter");
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    fn check_input<T: Scalar>(&self, x: Var<'_, T>) -> Result<()> {
        let (c, _, _) = x.dims3();
        if c != self.cfg.channels {
            return Err(Error::Config(format!("block {} expects {} channels, got {c}", self.name, self.cfg.channels)));
        }
        Ok(())
    }

    /// Concatenated band-grouped heads followed by the output projection.
    pub fn attention<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(x)?;
        let (c, h, w) = x.dims3();
        let qkv = self.qkv.forward(ctx, x);
        let (q, k, v) = (qkv.narrow_channels(0, c), qkv.narrow_channels(c, c), qkv.narrow_channels(2 * c, c));
        let bias = Band::ALL.map(|b| ctx.param(&format!("{}.bias.{}", self.name, b.label())));
        let layout = AttnLayout { channels: c, height: h, width: w, heads: self.cfg.num_heads, bands: self.bands };
        let heads = q.band_window_attention(k, v, bias, layout);
        if ctx.probing() {
            let vals = heads.value();
            let per = c / 4;
            let maps = Band::ALL.map(|band| {
                let mut m = vec![T::zero(); h * w];
                for ch in band.index() * per..(band.index() + 1) * per {
                    for (acc, &v) in m.iter_mut().zip(vals.channel(ch)) {
                        *acc += v;
                    }
                }
                let inv = T::one() / T::from_usize(per).unwrap();
                Tensor::from_parts(vec![h, w], m.into_iter().map(|v| v * inv).collect())
            });
            ctx.record_probe(BandProbe { block: self.name.clone(), maps });
        }
        Ok(self.proj.forward(ctx, heads))
    }

    /// FFN followed by block-FFT modulation with the learnable filter.
    pub fn freq_mod_ffn<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(x)?;
        let hidden = self.ffn1.forward(ctx, x).gelu();
        let out = self.ffn2.forward(ctx, hidden);
        Ok(out.block_frequency_filter(ctx.param(&format!("{}.filter", self.name))))
    }

    /// Residue added to the input by [`FfabBlock::forward`].
    pub fn branch<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let attn = self.attention(ctx, self.norm1.forward(ctx, f))?;
        let mid = f.add(attn);
        let modulated = self.freq_mod_ffn(ctx, self.norm2.forward(ctx, mid))?;
        Ok(attn.add(modulated))
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let branch = self.branch(ctx, f)?;
        Ok(f.add(branch))
    }
}

/// A run of blocks at one resolution.
#[derive(Debug, Clone)]
pub struct FfabStage {
    pub blocks: Vec<FfabBlock>,
}

impl FfabStage {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: FfabConfig, depth: usize) -> Result<Self> {
        let blocks = (0..depth).map(|i| FfabBlock::new(init, &format!("{name}.{i}"), cfg)).collect::<Result<_>>()?;
        Ok(FfabStage { blocks })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, mut f: Var<'t, T>) -> Result<Var<'t, T>> {
        for b in &self.blocks {
            f = b.forward(ctx, f)?;
        }
        Ok(f)
    }
}

/// Scale and shift fields predicted from prior features.
#[derive(Clone, Copy)]
pub struct AffineParams<'t, T: Scalar> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

/// Injection affine transform: two zero-initialised 1×1 convolutions over prior features.
#[derive(Debug, Clone)]
pub struct Iaf {
    gamma: Conv,
    beta: Conv,
}

impl Iaf {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, prior_channels: usize, channels: usize) -> Self {
        Iaf {
            gamma: Conv::zeros(init, &format!("{name}.gamma"), prior_channels, channels, 1),
            beta: Conv::zeros(init, &format!("{name}.beta"), prior_channels, channels, 1),
        }
    }

    pub fn params<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, prior: Var<'t, T>, site_hw: (usize, usize)) -> Result<AffineParams<'t, T>> {
        let (_, h, w) = prior.dims3();
        if (h, w) != site_hw {
            return Err(contract(format!("prior features {h}x{w} do not match injection site {}x{}", site_hw.0, site_hw.1)));
        }
        Ok(AffineParams { gamma: self.gamma.forward(ctx, prior), beta: self.beta.forward(ctx, prior) })
    }

    /// `params` followed by [`iaf_apply`].
    pub fn inject<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, y: Var<'t, T>, prior: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, h, w) = y.dims3();
        let p = self.params(ctx, prior, (h, w))?;
        iaf_apply(y, &p)
    }
}

/// `y · (1 + gamma) + beta`, elementwise.
pub fn iaf_apply<'t, T: Scalar>(y: Var<'t, T>, p: &AffineParams<'t, T>) -> Result<Var<'t, T>> {
    let shape = y.shape();
    if p.gamma.shape() != shape || p.beta.shape() != shape {
        return Err(contract(format!("affine fields {:?}/{:?} do not match feature {:?}", p.gamma.shape(), p.beta.shape(), shape)));
    }
    Ok(y.add(y.mul(p.gamma)).add(p.beta))
}
