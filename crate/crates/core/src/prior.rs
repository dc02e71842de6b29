//! Generative-prior providers: multi-resolution injection features and the
//! content space the synthesis transform is regressed onto.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, ParamStore, UpConv};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::CONTENT_STRIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    FixedFilter,
    ToyLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// Channels of every feature level.
    pub channels: usize,
    pub content_channels: usize,
    /// Decoder width of the toy autoencoder.
    pub decoder_width: usize,
    /// Seed of the fixed linear maps of the filter provider.
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PriorConfig {
    pub fn toy() -> Self {
        PriorConfig { kind: PriorKind::ToyLatent, channels: 16, content_channels: 16, decoder_width: 32, seed: 7 }
    }

    pub fn fixed() -> Self {
        PriorConfig { kind: PriorKind::FixedFilter, ..Self::toy() }
    }
}

/// Injection features, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFeatures<T> {
    pub levels: Vec<Tensor<T>>,
    pub provider: PriorKind,
}

/// 5-tap binomial blur with replicated borders, then 2× subsampling.
pub fn pyramid_down<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (c, h, w) = x.dims3();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; c * h * wo];
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..h {
            for ox in 0..wo {
                let cx = (2 * ox) as isize;
                rows[(ch * h + y) * wo + ox] =
                    TAPS.iter().enumerate().map(|(k, t)| t * plane[y * w + at(cx + k as isize - 2, w)].to_f64c()).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            let cy = (2 * oy) as isize;
            for ox in 0..wo {
                let v: f64 = TAPS.iter().enumerate().map(|(k, t)| t * rows[(ch * h + at(cy + k as isize - 2, h)) * wo + ox]).sum();
                out.push(T::from_f64c(v));
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}

/// `[cout, cin]` matrix applied at every pixel.
fn pointwise<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let cout = m.shape()[0];
    assert_eq!(m.shape()[1], c);
    let mut out = vec![T::zero(); cout * h * w];
    T::gemm(
        cout,
        c,
        h * w,
        T::one(),
        m.data(),
        (c as isize, 1),
        x.data(),
        ((h * w) as isize, 1),
        T::zero(),
        &mut out,
        ((h * w) as isize, 1),
    );
    Tensor::from_parts(vec![cout, h, w], out)
}

fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..ho {
            for xx in 0..wo {
                out.push(plane[(y / factor) * w + xx / factor]);
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}

/// Untrained provider: Gaussian pyramid lifted to feature channels by a seeded linear map.
#[derive(Debug, Clone)]
pub struct FixedFilterPrior<T> {
    lift: Tensor<T>,
    project: Tensor<T>,
}

impl<T: Scalar> FixedFilterPrior<T> {
    pub fn new(cfg: &PriorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut draw = |shape: &[usize], std: f64| {
            Tensor::from_fn(shape, |_| {
                T::from_f64c({
                    let n: f64 = StandardNormal.sample(&mut rng);
                    n * std
                })
            })
        };
        let lift = draw(&[cfg.channels, 3], 1.0);
        let project = draw(&[cfg.content_channels, cfg.channels], 1.0 / (cfg.channels as f64).sqrt());
        FixedFilterPrior { lift, project }
    }

    pub fn extract(&self, x: &Tensor<T>, stages: usize) -> PriorFeatures<T> {
        let mut levels = Vec::with_capacity(stages);
        let mut cur = x.clone();
        for _ in 0..stages {
            cur = pyramid_down(&cur);
            levels.push(pointwise(&cur, &self.lift));
        }
        PriorFeatures { levels, provider: PriorKind::FixedFilter }
    }

    /// Coarsest level of a full pyramid, projected and upsampled to the content grid.
    pub fn content_target(&self, x: &Tensor<T>, stages: usize) -> Tensor<T> {
        let feats = self.extract(x, stages);
        let coarsest = feats.levels.last().expect("at least one stage");
        let up = (1usize << stages) / CONTENT_STRIDE;
        upsample_nearest(&pointwise(coarsest, &self.project), up.max(1))
    }
}

/// Small convolutional autoencoder standing in for a pretrained diffusion backbone.
///
/// Parameters live under `name.enc*`, `name.dec*` and `name.content_scale`. A zero
/// content scale marks an untrained provider.
#[derive(Debug, Clone)]
pub struct ToyLatentPrior {
    pub name: String,
    pub cfg: PriorConfig,
    enc: [Conv; 5],
    dec_in: Conv,
    dec_up: [UpConv; 2],
    dec_out: Conv,
}

/// Encoder activations of the toy autoencoder.
pub struct ToyEncoding<'t, T: Scalar> {
    pub half: Var<'t, T>,
    pub quarter: Var<'t, T>,
    /// Unscaled content map.
    pub content: Var<'t, T>,
}

impl ToyLatentPrior {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: PriorConfig) -> Self {
        let (c, cc, dw) = (cfg.channels, cfg.content_channels, cfg.decoder_width);
        let enc = [
            Conv::new(init, &format!("{name}.enc1"), 3, c, 5, 2),
            Conv::new(init, &format!("{name}.enc2"), c, c, 3, 1),
            Conv::new(init, &format!("{name}.enc3"), c, c, 5, 2),
            Conv::new(init, &format!("{name}.enc4"), c, c, 3, 1),
            Conv::new(init, &format!("{name}.enc5"), c, cc, 3, 1),
        ];
        let dec_in = Conv::new(init, &format!("{name}.dec_in"), cc, dw, 3, 1);
        let dec_up = [UpConv::new(init, &format!("{name}.dec_up1"), dw, dw), UpConv::new(init, &format!("{name}.dec_up2"), dw, dw)];
        let dec_out = Conv::new(init, &format!("{name}.dec_out"), dw, 3, 3, 1);
        init.constant(format!("{name}.content_scale"), &[1], 0.0);
        ToyLatentPrior { name: name.to_string(), cfg, enc, dec_in, dec_up, dec_out }
    }

    pub fn scale_name(&self) -> String {
        format!("{}.content_scale", self.name)
    }

    /// Prefixes of the parameters trained by reconstruction.
    pub fn trainable_prefixes(&self) -> [String; 2] {
        [format!("{}.enc", self.name), format!("{}.dec", self.name)]
    }

    pub fn is_trained<T: Scalar>(&self, params: &ParamStore<T>) -> bool {
        params.get(&self.scale_name()).is_some_and(|s| s.data()[0] != T::zero())
    }

    fn check_trained<T: Scalar>(&self, params: &ParamStore<T>) -> Result<T> {
        if !self.is_trained(params) {
            return Err(Error::State("toy latent prior has not been trained".into()));
        }
        Ok(params.expect(&self.scale_name()).data()[0])
    }

    pub fn encode<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<ToyEncoding<'t, T>> {
        let (c, h, w) = x.dims3();
        if c != 3 || h % CONTENT_STRIDE != 0 || w % CONTENT_STRIDE != 0 {
            return Err(Error::Input(format!("toy prior needs a 3-channel image with sides divisible by 4, got {c}x{h}x{w}")));
        }
        let e = &self.enc;
        let f = e[0].forward(ctx, x.add_scalar(-0.5)).gelu();
        let half = e[1].forward(ctx, f).gelu();
        let f = e[2].forward(ctx, half).gelu();
        let quarter = e[3].forward(ctx, f).gelu();
        let content = e[4].forward(ctx, quarter);
        Ok(ToyEncoding { half, quarter, content })
    }

    /// Image from an unscaled content map.
    pub fn decode_raw<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, content: Var<'t, T>) -> Var<'t, T> {
        let mut f = self.dec_in.forward(ctx, content).gelu();
        for up in &self.dec_up {
            f = up.forward(ctx, f).gelu();
        }
        self.dec_out.forward(ctx, f).add_scalar(0.5)
    }

    /// Mean squared reconstruction error through the content bottleneck.
    pub fn reconstruction_loss<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let enc = self.encode(ctx, x)?;
        Ok(self.decode_raw(ctx, enc.content).mse(x))
    }

    pub fn extract<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>, stages: usize) -> Result<PriorFeatures<T>> {
        self.check_trained(params)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, params);
        let enc = self.encode(&ctx, tape.constant(x.clone()))?;
        let mut levels = vec![(*enc.half.value()).clone(), (*enc.quarter.value()).clone()];
        while levels.len() < stages {
            let last = tape.constant(levels.last().unwrap().clone());
            levels.push((*last.avg_pool2().value()).clone());
        }
        levels.truncate(stages);
        Ok(PriorFeatures { levels, provider: PriorKind::ToyLatent })
    }

    pub fn content_target<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let scale = self.check_trained(params)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, params);
        let enc = self.encode(&ctx, tape.constant(x.clone()))?;
        Ok(enc.content.value().scale(scale))
    }

    pub fn decode<T: Scalar>(&self, params: &ParamStore<T>, content: &Tensor<T>) -> Result<Tensor<T>> {
        let scale = self.check_trained(params)?;
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, params);
        let raw = tape.constant(content.scale(T::one() / scale));
        Ok((*self.decode_raw(&ctx, raw).value()).clone())
    }
}

/// One of the two interchangeable providers.
#[derive(Debug, Clone)]
pub enum PriorProvider<T> {
    Fixed(FixedFilterPrior<T>),
    Toy(ToyLatentPrior),
}

impl<T: Scalar> PriorProvider<T> {
    pub fn new(init: &mut Init<'_, T>, name: &str, cfg: PriorConfig) -> Self {
        match cfg.kind {
            PriorKind::FixedFilter => PriorProvider::Fixed(FixedFilterPrior::new(&cfg)),
            PriorKind::ToyLatent => PriorProvider::Toy(ToyLatentPrior::new(init, name, cfg)),
        }
    }

    pub fn kind(&self) -> PriorKind {
        match self {
            PriorProvider::Fixed(_) => PriorKind::FixedFilter,
            PriorProvider::Toy(_) => PriorKind::ToyLatent,
        }
    }

    fn check_image(x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 3 || x.shape()[0] != 3 {
            return Err(Error::Input(format!("expected a [3, H, W] image, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Features for `stages` codec stages of a padded image.
    pub fn extract_prior(&self, params: &ParamStore<T>, x: &Tensor<T>, stages: usize) -> Result<PriorFeatures<T>> {
        Self::check_image(x)?;
        match self {
            PriorProvider::Fixed(p) => Ok(p.extract(x, stages)),
            PriorProvider::Toy(p) => p.extract(params, x, stages),
        }
    }

    pub fn content_target(&self, params: &ParamStore<T>, x: &Tensor<T>, stages: usize) -> Result<Tensor<T>> {
        Self::check_image(x)?;
        match self {
            PriorProvider::Fixed(p) => Ok(p.content_target(x, stages)),
            PriorProvider::Toy(p) => p.content_target(params, x),
        }
    }

    /// Image from a content map; only the toy provider has a decoder.
    pub fn decode(&self, params: &ParamStore<T>, content: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            PriorProvider::Fixed(_) => Err(Error::State("the fixed filter provider cannot decode content".into())),
            PriorProvider::Toy(p) => p.decode(params, content),
        }
    }
}
