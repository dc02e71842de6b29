//! Image ⇄ bitstream.

use crate::autograd::{Tape, Var};
use crate::entropy::{decode_stream, encode_stream, factorized_probs, Bitstream, FactorizedModel, GaussianModel, Header, FACTORIZED_BINS};
use crate::error::{Error, Result};
use crate::model::{Model, LOGITS};
use crate::nn::{BandProbe, Ctx};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest latent symbol magnitude the escape code carries.
pub const MAX_SYMBOL: i64 = (1 << 16) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub struct DecodeOptions {
    /// Sampler steps; `None` uses the model default.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Decode the content representation directly, skipping the sampler.
    pub bypass: bool,
}


/// Quantized latents recovered from a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents<T> {
    pub z_hat: Tensor<T>,
    pub y_hat: Tensor<T>,
    /// Synthesis conditioning from the hyper path.
    pub w: Tensor<T>,
}

fn to_symbols<T: Scalar>(t: &Tensor<T>) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|v| {
            let s = v.to_f64c().round();
            if !s.is_finite() || s.abs() > MAX_SYMBOL as f64 {
                return Err(Error::Input(format!("latent symbol {s} outside the codable range")));
            }
            Ok(s as i32)
        })
        .collect()
}

fn factorized_model<T: Scalar>(model: &Model<T>, plane: usize) -> Result<FactorizedModel> {
    let logits = model.params.expect(LOGITS);
    debug_assert_eq!(logits.shape()[1], FACTORIZED_BINS);
    FactorizedModel::new(&factorized_probs(logits), plane)
}

pub fn compress<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Bitstream> {
    if x.data().iter().any(|v| !(v.to_f64c() >= 0.0 && v.to_f64c() <= 1.0)) {
        return Err(Error::Input("image values must lie in [0, 1]".into()));
    }
    let xp = model.pad(x)?;
    let (_, h, w) = x.dims3();
    let prior = model.extract_prior(&xp)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &model.params);
    let tf = &model.transforms;
    let levels: Vec<Var<'_, T>> = prior.levels.iter().map(|l| tape.constant(l.clone())).collect();
    let y = tf.analysis(&ctx, tape.constant(xp), &levels)?;
    let z = tf.hyper_encode(&ctx, y, *levels.last().expect("at least one level"))?;
    let z_sym = to_symbols(&z.value())?;
    let z_hat = tape.constant(Tensor::from_parts(z.shape(), z_sym.iter().map(|&s| T::from_f64c(s as f64)).collect()));
    let (_, zh, zw) = z_hat.dims3();
    let z_bytes = encode_stream(&z_sym, &factorized_model(model, zh * zw)?)?;

    let (_, lh, lw) = y.dims3();
    let hyper = tf.hyper_decode(&ctx, z_hat, (lh, lw))?;
    let layout = model.context.layout();
    let mut decoded = Vec::with_capacity(layout.len());
    let mut y_bytes = Vec::with_capacity(layout.len());
    for i in 0..layout.len() {
        let p = model.context.params(&ctx, hyper, &decoded, i)?;
        let yi = y.narrow_channels(layout.start(i), layout.sizes()[i]).value();
        let mu = p.mu.value();
        let sym = to_symbols(&yi.sub(&mu))?;
        let sigmas = p.sigma.value().data().iter().map(|s| s.to_f64c()).collect();
        y_bytes.push(encode_stream(&sym, &GaussianModel { sigmas })?);
        let q = Tensor::from_parts(mu.shape().to_vec(), sym.iter().map(|&s| T::from_f64c(s as f64)).collect());
        decoded.push(tape.constant(q.add(&mu)));
    }
    let header = Header {
        flags: 0,
        width: u32::try_from(w).map_err(|_| Error::Input("image too wide".into()))?,
        height: u32::try_from(h).map_err(|_| Error::Input("image too tall".into()))?,
        down_factor: model.cfg.codec.down_factor as u8,
        latent_channels: model.cfg.codec.latent_channels as u16,
        model_hash: model.model_hash(),
    };
    Ok(Bitstream { header, z: z_bytes, y: y_bytes })
}

/// Entropy-decodes both latents and the synthesis conditioning.
pub fn decode_latents<T: Scalar>(model: &Model<T>, bs: &Bitstream) -> Result<Latents<T>> {
    let hd = &bs.header;
    let cfg = &model.cfg.codec;
    if hd.down_factor as usize != cfg.down_factor || hd.latent_channels as usize != cfg.latent_channels {
        return Err(Error::Model(format!(
            "stream has down factor {} and {} latent channels, model has {} and {}",
            hd.down_factor, hd.latent_channels, cfg.down_factor, cfg.latent_channels
        )));
    }
    let hash = model.model_hash();
    if hd.model_hash != hash {
        return Err(Error::Model(format!("stream model hash {:016x} does not match {hash:016x}", hd.model_hash)));
    }
    let (h, w) = (hd.height as usize, hd.width as usize);
    if h < cfg.down_factor || w < cfg.down_factor {
        return Err(Error::Integrity(format!("image {h}x{w} is smaller than the down factor")));
    }
    let (zh, zw) = cfg.hyper_dims(h, w);
    let (lh, lw) = cfg.latent_dims(h, w);
    let hc = cfg.hyper_channels;
    let z_sym = decode_stream(&bs.z, hc * zh * zw, &factorized_model(model, zh * zw)?)?;
    let z_hat = Tensor::from_parts(vec![hc, zh, zw], z_sym.iter().map(|&s| T::from_f64c(s as f64)).collect());

    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &model.params);
    let tf = &model.transforms;
    let zv = tape.constant(z_hat.clone());
    let hyper = tf.hyper_decode(&ctx, zv, (lh, lw))?;
    let wv = tf.hyper_decode_w(&ctx, zv, (lh, lw))?;
    let layout = model.context.layout();
    let mut decoded = Vec::with_capacity(layout.len());
    for (i, stream) in bs.y.iter().enumerate() {
        let p = model.context.params(&ctx, hyper, &decoded, i)?;
        let mu = p.mu.value();
        let sigmas: Vec<f64> = p.sigma.value().data().iter().map(|s| s.to_f64c()).collect();
        let sym = decode_stream(stream, sigmas.len(), &GaussianModel { sigmas })?;
        let q = Tensor::from_parts(mu.shape().to_vec(), sym.iter().map(|&s| T::from_f64c(s as f64)).collect());
        decoded.push(tape.constant(q.add(&mu)));
    }
    let y_hat = (*Var::concat_channels(&decoded).value()).clone();
    Ok(Latents { z_hat, y_hat, w: (*wv.value()).clone() })
}

/// Content representation from decoded latents.
pub fn synthesize<T: Scalar>(model: &Model<T>, lat: &Latents<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &model.params);
    let z_c = model.transforms.synthesis(&ctx, tape.constant(lat.y_hat.clone()), tape.constant(lat.w.clone()))?;
    Ok((*z_c.value()).clone())
}

/// Reconstruction of the coded image, cropped to its original size and clamped to `[0, 1]`.
pub fn decompress<T: Scalar>(model: &Model<T>, bs: &Bitstream, opts: &DecodeOptions) -> Result<Tensor<T>> {
    let lat = decode_latents(model, bs)?;
    let z_c = synthesize(model, &lat)?;
    let latent = if opts.bypass {
        z_c
    } else {
        let steps = opts.steps.unwrap_or(model.cfg.diffusion.sample_steps);
        model.denoiser.ddim_sample(&model.params, &model.schedule, &z_c, steps, opts.seed)?
    };
    let img = model.prior.decode(&model.params, &latent)?;
    let (h, w) = (bs.header.height as usize, bs.header.width as usize);
    let (_, ph, pw) = img.dims3();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, r) = (i / (h * w), i % (h * w));
        let v = img.data()[(c * ph + r / w) * pw + r % w];
        v.max(T::zero()).min(T::one())
    }))
}

/// Per-band mean head outputs of every attention block in the analysis transform.
pub fn band_probes<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<BandProbe<T>>> {
    let xp = model.pad(x)?;
    let prior = model.extract_prior(&xp)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &model.params).with_probes();
    let levels: Vec<Var<'_, T>> = prior.levels.iter().map(|l| tape.constant(l.clone())).collect();
    model.transforms.analysis(&ctx, tape.constant(xp), &levels)?;
    Ok(ctx.take_probes())
}
