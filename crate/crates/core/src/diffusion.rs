//! Toy latent diffusion decoder: linear noise schedule, a small conditional
//! U-net predicting the noise, and a deterministic DDIM sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::ffab::Iaf;
use crate::nn::{Conv, Ctx, Init};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Default number of sampler steps.
    pub sample_steps: usize,
    pub width: usize,
    pub time_dim: usize,
    /// Sampler bound on the predicted clean latent; 0 disables.
    pub clip_latent: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { train_steps: 1000, beta_start: 1e-4, beta_end: 0.02, sample_steps: 25, width: 32, time_dim: 32, clip_latent: 5.0 }
    }
}

/// `beta_t` and `alpha_bar_t` for `t = 1..=T`; `alpha_bar_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
        .collect();
    let mut acc = 1.0;
    let alpha_bar = beta
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Input(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// `S` evenly spaced timesteps of `[1, T]`, descending and ending at `ceil(T/S)`.
    pub fn sampling_steps(&self, s: usize) -> Vec<usize> {
        let t = self.steps();
        let s = s.clamp(1, t);
        (1..=s).rev().map(|k| (k * t).div_ceil(s)).collect()
    }
}

/// `sqrt(ab)·z0 + sqrt(1 - ab)·eps`.
pub fn add_noise<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if !z0.same_shape(eps) {
        return Err(contract(format!("noise {:?} does not match latent {:?}", eps.shape(), z0.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64c(ab.sqrt()), T::from_f64c((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step<T: Scalar>(z_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Input(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let (ab, ap) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (st, nt) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sp, np) = (ap.sqrt(), (1.0 - ap).sqrt());
    Ok(z_t.zip_map(eps_hat, |z, e| {
        let (z, e) = (z.to_f64c(), e.to_f64c());
        let z0 = (z - nt * e) / st;
        T::from_f64c(sp * z0 + np * e)
    }))
}

/// DDIM update with the predicted clean latent clamped to `[-clip, clip]` and the
/// noise estimate made consistent with it. Equals [`ddim_step`] when nothing is clamped.
pub fn ddim_step_clamped<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    clip: f64,
) -> Result<Tensor<T>> {
    if clip <= 0.0 {
        return ddim_step(z_t, eps_hat, t, t_prev, sched);
    }
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Input(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let (ab, ap) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (st, nt) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sp, np) = (ap.sqrt(), (1.0 - ap).sqrt());
    Ok(z_t.zip_map(eps_hat, |z, e| {
        let (z, e) = (z.to_f64c(), e.to_f64c());
        let z0 = (z - nt * e) / st;
        if z0.abs() <= clip {
            return T::from_f64c(sp * z0 + np * e);
        }
        let z0 = z0.clamp(-clip, clip);
        let e = (z - st * z0) / nt;
        T::from_f64c(sp * z0 + np * e)
    }))
}

/// Mean squared error of a noise prediction.
pub fn noise_objective<'t, T: Scalar>(eps_hat: Var<'t, T>, eps: &Tensor<T>) -> Var<'t, T> {
    eps_hat.mse(eps_hat.tape().constant(eps.clone()))
}

/// Sinusoidal embedding of a timestep, `[dim, 1, 1]`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[dim, 1, 1], |i| {
        let k = i % half.max(1);
        let freq = (-(10_000f64).ln() * k as f64 / half.max(1) as f64).exp();
        let a = t as f64 * freq;
        T::from_f64c(if i < half { a.sin() } else { a.cos() })
    })
}

/// Two-level U-net over `concat(z_t, z_c)` with timestep FiLM and content injection per level.
///
/// The network predicts a residual on top of `sqrt(1 - alpha_bar_t)·z_t`, the
/// noise estimate that is optimal when the clean latent has unit variance.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DiffusionConfig,
    pub channels: usize,
    schedule: NoiseSchedule,
    time: Conv,
    inp: Conv,
    iaf0: Iaf,
    mid0: Conv,
    down: Conv,
    iaf1: Iaf,
    mid1: Conv,
    up: Conv,
    dec0: Conv,
    out: Conv,
}

impl Denoiser {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: DiffusionConfig, channels: usize) -> Self {
        let w = cfg.width;
        let schedule =
            make_schedule(cfg.train_steps, cfg.beta_start, cfg.beta_end).expect("diffusion config validated before construction");
        Denoiser {
            cfg,
            channels,
            schedule,
            time: Conv::new(init, &format!("{name}.time"), cfg.time_dim, 2 * w + 4 * w, 1, 1),
            inp: Conv::new(init, &format!("{name}.in"), 2 * channels, w, 3, 1),
            iaf0: Iaf::new(init, &format!("{name}.iaf0"), channels, w),
            mid0: Conv::new(init, &format!("{name}.mid0"), w, w, 3, 1),
            down: Conv::new(init, &format!("{name}.down"), w, 2 * w, 3, 2),
            iaf1: Iaf::new(init, &format!("{name}.iaf1"), channels, 2 * w),
            mid1: Conv::new(init, &format!("{name}.mid1"), 2 * w, 2 * w, 3, 1),
            up: Conv::new(init, &format!("{name}.up"), 2 * w, w, 3, 1),
            dec0: Conv::new(init, &format!("{name}.dec0"), w, w, 3, 1),
            out: Conv::with_gain(init, &format!("{name}.out"), w, channels, 3, 1, 0.1),
        }
    }

    /// Predicted noise for `z_t` at step `t`, conditioned on the content representation.
    pub fn denoise_eps<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, z_t: Var<'t, T>, t: usize, z_c: Var<'t, T>) -> Result<Var<'t, T>> {
        let (c, h, w) = z_t.dims3();
        if c != self.channels || z_c.dims3() != (c, h, w) {
            return Err(contract(format!(
                "denoiser expects matching [{}, H, W] inputs, got {:?} and {:?}",
                self.channels,
                z_t.shape(),
                z_c.shape()
            )));
        }
        if t == 0 || t > self.cfg.train_steps {
            return Err(Error::Input(format!("timestep {t} outside [1, {}]", self.cfg.train_steps)));
        }
        let (ph, pw) = (h + h % 2, w + w % 2);
        let (zt, zc) = if (ph, pw) == (h, w) { (z_t, z_c) } else { (z_t.replicate_pad(ph, pw), z_c.replicate_pad(ph, pw)) };
        let wd = self.cfg.width;
        let emb = ctx.constant(timestep_embedding(t, self.cfg.time_dim));
        let film = self.time.forward(ctx, emb).reshape_var(&[6 * wd]);
        let (s0, b0) = (film.narrow_flat(0, wd), film.narrow_flat(wd, wd));
        let (s1, b1) = (film.narrow_flat(2 * wd, 2 * wd), film.narrow_flat(4 * wd, 2 * wd));
        let modulate = |f: Var<'t, T>, s: Var<'t, T>, b: Var<'t, T>| f.add(f.mul_channels(s)).add_channel_bias(b);

        let f = self.inp.forward(ctx, Var::concat_channels(&[zt, zc]));
        let f = self.iaf0.inject(ctx, modulate(f, s0, b0), zc)?.gelu();
        let skip = self.mid0.forward(ctx, f).gelu();
        let g = self.down.forward(ctx, skip);
        let g = self.iaf1.inject(ctx, modulate(g, s1, b1), zc.avg_pool2())?.gelu();
        let g = self.mid1.forward(ctx, g).gelu();
        let u = self.up.forward(ctx, g.upsample2()).add(skip).gelu();
        let u = self.dec0.forward(ctx, u).gelu();
        let eps = self.out.forward(ctx, u);
        let eps = if (ph, pw) == (h, w) { eps } else { eps.crop(h, w) };
        Ok(eps.add(z_t.scale((1.0 - self.schedule.alpha_bar(t)).sqrt())))
    }

    /// Mean squared error between `eps` and the prediction at `add_noise(z0, t, eps)`.
    #[allow(clippy::too_many_arguments)]
    pub fn noise_loss<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        sched: &NoiseSchedule,
        z0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
        z_c: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let z_t = add_noise(z0, t, eps, sched)?;
        let pred = self.denoise_eps(ctx, ctx.constant(z_t), t, z_c)?;
        Ok(noise_objective(pred, eps))
    }

    /// Deterministic DDIM sampling from a seeded standard-normal start.
    ///
    /// Predicted clean latents are clamped to the configured bound at every step.
    pub fn ddim_sample<T: Scalar>(
        &self,
        params: &crate::nn::ParamStore<T>,
        sched: &NoiseSchedule,
        z_c: &Tensor<T>,
        steps: usize,
        seed: u64,
    ) -> Result<Tensor<T>> {
        if steps == 0 {
            return Err(Error::Input("sampler needs at least one step".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Tensor::from_fn(z_c.shape(), |_| T::from_f64c(StandardNormal.sample(&mut rng)));
        let ts = sched.sampling_steps(steps);
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let tape = crate::autograd::Tape::inference();
            let ctx = Ctx::new(&tape, params);
            let eps = self.denoise_eps(&ctx, tape.constant(z.clone()), t, tape.constant(z_c.clone()))?;
            z = ddim_step_clamped(&z, &eps.value(), t, t_prev, sched, self.cfg.clip_latent)?;
        }
        Ok(z)
    }
}
