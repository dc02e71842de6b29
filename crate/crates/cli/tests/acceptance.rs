//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2 and 6 share a toy model trained once at 64×64. Criteria 7 to 9
//! drive the `ffabic` binary on a few-step configuration.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ffabic::autograd::{Tape, Var};
use ffabic::codec::{compress, decode_latents, decompress, synthesize, DecodeOptions};
use ffabic::diffusion::{add_noise, ddim_step, make_schedule, DiffusionConfig};
use ffabic::entropy::{decode_stream, encode_stream, GaussianModel};
use ffabic::ffab::{Band, FfabBlock, FfabConfig, Iaf};
use ffabic::model::{Model, ModelConfig, PassMode};
use ffabic::nn::{Ctx, Init, ParamStore};
use ffabic::numerics::{fft2, grad_check_at, spread_coordinates, window_merge, window_partition, WindowSpec, ZERO_AMPLITUDE};
use ffabic::prior::PriorConfig;
use ffabic::training::{
    frequency_loss, held_out_images, spatial_loss, synthetic_image, total_loss, train_stage, Config, Dataset, LossWeights, Stage, StageRun,
    TrainConfig,
};
use ffabic::transforms::CodecConfig;
use ffabic::Tensor;
use ffabic_cli::imageio::write_png;
use ffabic_cli::metrics::psnr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let (u, v): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

/// Small architecture for the gradient and identity checks.
fn tiny_config() -> ModelConfig {
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

fn ffab_block(cfg: FfabConfig, seed: u64) -> (FfabBlock, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = FfabBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "blk", cfg).unwrap();
    (b, store)
}

// ---------------------------------------------------------------------------
// shared trained fixture

struct Fixture {
    /// Prior trained, codec untouched.
    untrained: Model<f32>,
    /// Codec trained at λ1 = 1.
    trained: Model<f32>,
    /// Codec trained at λ1 = 0.25.
    low_rate_weight: Model<f32>,
    codec_losses: Vec<f64>,
    seconds: f64,
}

fn fixture_config() -> Config {
    Config {
        model: ModelConfig::toy(),
        train: TrainConfig {
            seed: 0,
            batch_size: 4,
            crop: 64,
            lr: 1e-4,
            prior_lr: 1e-3,
            prior_steps: 800,
            codec_steps: 500,
            ..TrainConfig::default()
        },
    }
}

fn copy_model(m: &Model<f32>) -> Model<f32> {
    Model::from_checkpoint(&m.checkpoint(0, 0, 0)).unwrap()
}

fn train_fixture() -> Fixture {
    let cfg = fixture_config();
    let data = Dataset::Synthetic { size: cfg.train.crop };
    let t0 = Instant::now();
    let mut prior = Model::new(cfg.model, cfg.train.seed).unwrap();
    train_stage(&mut prior, &cfg.train, &data, Stage::Prior, &StageRun::default()).unwrap();
    let mut trained = copy_model(&prior);
    let logs = train_stage(&mut trained, &cfg.train, &data, Stage::Codec, &StageRun::default()).unwrap();
    let mut low = copy_model(&prior);
    let mut tc = cfg.train.clone();
    tc.weights.lambda1 = 0.25;
    train_stage(&mut low, &tc, &data, Stage::Codec, &StageRun::default()).unwrap();
    Fixture {
        untrained: prior,
        trained,
        low_rate_weight: low,
        codec_losses: logs.iter().map(|l| l.report.total).collect(),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Mean actual bpp and bypass-decoded PSNR over the held-out set.
fn rd_point(m: &Model<f32>, images: &[Tensor<f32>]) -> (f64, f64) {
    let (mut bpp, mut db) = (0.0, 0.0);
    for x in images {
        let (_, h, w) = x.dims3();
        let bs = compress(m, x).unwrap();
        bpp += bs.to_bytes().unwrap().len() as f64 * 8.0 / (h * w) as f64;
        let rec = decompress(m, &bs, &DecodeOptions { bypass: true, ..Default::default() }).unwrap();
        db += psnr(x, &rec).unwrap();
    }
    (bpp / images.len() as f64, db / images.len() as f64)
}

// ---------------------------------------------------------------------------
// criteria

fn lossless_coding(fx: &Fixture) -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut symbols_total = 0;
    for case in 0..200 {
        let n = rng.random_range(1..3000);
        let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..30.0)).collect();
        let symbols: Vec<i32> = sigmas
            .iter()
            .map(|s| {
                if rng.random_bool(0.01) {
                    rng.random_range(-4000..4000)
                } else {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    (u * 3.0 * s).round() as i32
                }
            })
            .collect();
        let model = GaussianModel { sigmas };
        let bytes = encode_stream(&symbols, &model).map_err(|e| format!("random case {case}: {e}"))?;
        let back = decode_stream(&bytes, symbols.len(), &model).map_err(|e| format!("random case {case}: {e}"))?;
        ensure(back == symbols, format!("random case {case} decoded differently"))?;
        symbols_total += symbols.len();
    }
    let m = &fx.trained;
    for i in 0..50 {
        let x: Tensor<f32> = synthetic_image(0x5EED_0000 + i, 32, 32);
        let bs = compress(m, &x).map_err(|e| e.to_string())?;
        let lat =
            decode_latents(m, &ffabic::entropy::Bitstream::from_bytes(&bs.to_bytes().unwrap()).unwrap()).map_err(|e| e.to_string())?;
        let xp = m.pad(&x).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &m.params);
        let prior = m.extract_prior(&xp).unwrap();
        let pass = m.codec_pass(&ctx, &xp, &prior, PassMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ensure(lat.y_hat == *pass.y_hat.value(), format!("trained image {i}: decoded latents differ"))?;
        ensure(synthesize(m, &lat).unwrap() == *pass.z_c.value(), format!("trained image {i}: synthesis differs"))?;
        ensure(lat.z_hat.data().iter().all(|v| v.fract() == 0.0), "hyper latents not integral")?;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("200 random streams ({symbols_total} symbols) and 50 trained-model latents exact in {secs:.1} s"))
}

fn rate_fidelity(fx: &Fixture) -> Check {
    let m = &fx.trained;
    let mut worst = f64::NEG_INFINITY;
    for (i, x) in held_out_images::<f32>(8, 64).iter().enumerate() {
        let bytes = compress(m, x).unwrap().to_bytes().unwrap();
        let actual = bytes.len() as f64 * 8.0 / 4096.0;
        let xp = m.pad(x).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &m.params);
        let pass = m.codec_pass(&ctx, &xp, &m.extract_prior(&xp).unwrap(), PassMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let estimate = pass.coded_bits / 4096.0;
        let bound = estimate * 1.02 + (ffabic::entropy::Header::LEN + 11 * 32) as f64 * 8.0 / 4096.0;
        ensure(actual <= bound, format!("image {i}: {actual:.4} bpp > bound {bound:.4} (estimate {estimate:.4})"))?;
        worst = worst.max(actual - bound);
    }
    Ok(format!("8 held-out images within bound (worst margin {:.4} bpp)", -worst))
}

fn probe_sum<'t>(v: Var<'t, f64>, probe: &Tensor<f64>) -> Var<'t, f64> {
    v.mul(v.tape().constant(probe.clone())).sum()
}

fn attention_of<'t>(
    b: &FfabBlock,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    probe: &Tensor<f64>,
    v: Var<'t, f64>,
    bind: Option<&str>,
) -> Var<'t, f64> {
    let ctx = Ctx::new(v.tape(), store);
    let input = match bind {
        Some(name) => {
            ctx.bind(name, v);
            ctx.constant(x.clone())
        }
        None => v,
    };
    probe_sum(b.attention(&ctx, input).unwrap(), probe)
}

fn freq_mod_of<'t>(
    b: &FfabBlock,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    probe: &Tensor<f64>,
    v: Var<'t, f64>,
    bind: Option<&str>,
) -> Var<'t, f64> {
    let ctx = Ctx::new(v.tape(), store);
    let input = match bind {
        Some(name) => {
            ctx.bind(name, v);
            ctx.constant(x.clone())
        }
        None => v,
    };
    probe_sum(b.freq_mod_ffn(&ctx, input).unwrap(), probe)
}

fn codec_objective<'t>(m: &Model<f64>, xp: &Tensor<f64>, name: &str, which: &str, probe: &Tensor<f64>, v: Var<'t, f64>) -> Var<'t, f64> {
    let ctx = Ctx::new(v.tape(), &m.params);
    ctx.bind(name, v);
    let prior = m.extract_prior(xp).unwrap();
    let pass = m.codec_pass(&ctx, xp, &prior, PassMode::Relaxed, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    match which {
        "rate" => ffabic::training::rate_loss(pass.bits_y, pass.bits_z, 1024).unwrap(),
        _ => probe_sum(pass.z_c, probe),
    }
}

fn iaf_objective<'t>(iaf: &Iaf, store: &ParamStore<f64>, y: &Tensor<f64>, yd: &Tensor<f64>, w: Var<'t, f64>) -> Var<'t, f64> {
    let ctx = Ctx::new(w.tape(), store);
    ctx.bind("iaf.gamma.w", w);
    ctx.bind("iaf.beta.w", w.scale(-0.5));
    iaf.inject(&ctx, ctx.constant(y.clone()), ctx.constant(yd.clone())).unwrap().square().sum()
}

fn noise_objective_of<'t>(
    m: &Model<f64>,
    name: Option<&str>,
    z0: &Tensor<f64>,
    eps: &Tensor<f64>,
    zc: &Tensor<f64>,
    v: Var<'t, f64>,
) -> Var<'t, f64> {
    let ctx = Ctx::new(v.tape(), &m.params);
    let zc_var = match name {
        Some(n) => {
            ctx.bind(n, v);
            ctx.constant(zc.clone())
        }
        None => v,
    };
    m.denoiser.noise_loss(&ctx, &m.schedule, z0, 370, eps, zc_var).unwrap()
}

fn gradient_suite() -> Check {
    let t0 = Instant::now();
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut check = |label: &str, f: &dyn Fn() -> f64| results.push((label.to_string(), f()));
    let coords = |t: &Tensor<f64>| spread_coordinates(t.len(), 40);

    let (b, store) = ffab_block(FfabConfig { channels: 8, num_heads: 8, window_base: 2, fft_block: 4 }, 1);
    let x = random(&[8, 5, 6], 2, -1.0, 1.0);
    let probe = random(&[8, 5, 6], 3, -1.0, 1.0);
    check("ffab_attention dx", &|| {
        grad_check_at(|v| attention_of(&b, &store, &x, &probe, v, None), &x, &coords(&x)).unwrap().max_rel_error
    });
    for p in ["blk.qkv.w", "blk.bias.LL", "blk.bias.HL", "blk.proj.w"] {
        let th = store.expect(p).clone();
        check(&format!("ffab_attention {p}"), &|| {
            grad_check_at(|v| attention_of(&b, &store, &x, &probe, v, Some(p)), &th, &coords(&th)).unwrap().max_rel_error
        });
    }

    let (b, mut store) = ffab_block(FfabConfig { channels: 8, num_heads: 4, window_base: 2, fft_block: 4 }, 4);
    *store.get_mut("blk.filter").unwrap() = random(&[4, 4, 4], 5, -1.0, 1.0);
    let x = random(&[8, 6, 5], 6, -1.0, 1.0);
    let probe = random(&[8, 6, 5], 7, -1.0, 1.0);
    check("freq_mod_ffn dx", &|| grad_check_at(|v| freq_mod_of(&b, &store, &x, &probe, v, None), &x, &coords(&x)).unwrap().max_rel_error);
    let th = store.expect("blk.filter").clone();
    check("freq_mod_ffn filter", &|| {
        grad_check_at(|v| freq_mod_of(&b, &store, &x, &probe, v, Some("blk.filter")), &th, &coords(&th)).unwrap().max_rel_error
    });

    let mut istore = ParamStore::<f64>::new();
    let iaf = Iaf::new(&mut Init { store: &mut istore, rng: &mut ChaCha8Rng::seed_from_u64(8) }, "iaf", 3, 4);
    let y = random(&[4, 3, 3], 9, -1.0, 1.0);
    let yd = random(&[3, 3, 3], 10, -1.0, 1.0);
    let w0 = random(&[4, 3, 1, 1], 11, -1.0, 1.0);
    check("iaf", &|| grad_check_at(|w| iaf_objective(&iaf, &istore, &y, &yd, w), &w0, &coords(&w0)).unwrap().max_rel_error);

    let mut m: Model<f64> = Model::new(tiny_config(), 12).unwrap();
    let x = random(&[3, 32, 32], 13, 0.0, 1.0);
    let xp = m.pad(&x).unwrap();
    let probe = random(&[4, 8, 8], 14, -1.0, 1.0);
    for name in ["codec.analysis.0.down.w", "codec.synth.out.w", "codec.hyper_w.up2.w"] {
        let th = m.params.expect(name).clone();
        check(&format!("synthesis∘analysis {name}"), &|| {
            grad_check_at(|v| codec_objective(&m, &xp, name, "zc", &probe, v), &th, &coords(&th)).unwrap().max_rel_error
        });
    }
    for name in ["codec.analysis.0.down.w", "codec.context.3.mid.w", "codec.factorized.logits", "codec.hyper_a.down1.w"] {
        let th = m.params.expect(name).clone();
        check(&format!("rate_loss {name}"), &|| {
            grad_check_at(|v| codec_objective(&m, &xp, name, "rate", &probe, v), &th, &coords(&th)).unwrap().max_rel_error
        });
    }

    let a = random(&[4, 8, 8], 15, -1.0, 1.0);
    let target = random(&[4, 8, 8], 16, -1.0, 1.0);
    check("spatial_loss", &|| {
        grad_check_at(|v| spatial_loss(v, v.tape().constant(target.clone())).unwrap(), &a, &coords(&a)).unwrap().max_rel_error
    });
    check("frequency_loss", &|| {
        grad_check_at(|v| frequency_loss(v, v.tape().constant(target.clone())).unwrap(), &a, &coords(&a)).unwrap().max_rel_error
    });

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (name, t) in m.params.iter_mut() {
        if name.starts_with("denoiser.") && (name.contains(".gamma.") || name.contains(".beta.")) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let z0 = normal(&[4, 8, 8], 18);
    let eps = normal(&[4, 8, 8], 19);
    let zc = normal(&[4, 8, 8], 20);
    check("noise_loss z_c", &|| {
        grad_check_at(|v| noise_objective_of(&m, None, &z0, &eps, &zc, v), &zc, &coords(&zc)).unwrap().max_rel_error
    });
    let names: Vec<String> = m.params.names_with_prefix("denoiser.").filter(|n| n.ends_with(".w")).take(3).cloned().collect();
    for name in &names {
        let th = m.params.expect(name).clone();
        check(&format!("noise_loss {name}"), &|| {
            grad_check_at(|v| noise_objective_of(&m, Some(name), &z0, &eps, &zc, v), &th, &coords(&th)).unwrap().max_rel_error
        });
    }

    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().cloned().fold((String::new(), 0.0), |acc, r| if r.1 >= acc.1 { r } else { acc });
    if let Some((label, err)) = results.iter().find(|r| !(r.1 <= 1e-4)) {
        return Err(format!("{label}: relative error {err:.2e}"));
    }
    ensure(secs < 600.0, format!("took {secs:.0} s"))?;
    Ok(format!("{} checks ≤ 1e-4 (worst {} at {:.1e}) in {secs:.1} s", results.len(), worst.0, worst.1))
}

fn structural_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..24), rng.random_range(1..24));
        let win = WindowSpec::new(rng.random_range(1..9), rng.random_range(1..9)).unwrap();
        let x = random(&[c, h, w], 100 + case, -1.0, 1.0);
        let (wins, info) = window_partition(&x, win);
        ensure(window_merge(&wins, &info).unwrap() == x, format!("window round trip {case}: {c}x{h}x{w} with {win:?}"))?;
    }

    let x = random(&[2, 9, 12], 22, -1.0, 1.0);
    let spec = fft2(&x);
    let energy: f64 = spec.data().iter().map(|z| z.norm_sqr()).sum();
    let want = 9.0 * 12.0 * x.data().iter().map(|v| v * v).sum::<f64>();
    let parseval = (energy - want).abs() / want;
    ensure(parseval <= 1e-5, format!("Parseval relative error {parseval:.2e}"))?;

    let mut store = ParamStore::<f64>::new();
    let iaf = Iaf::new(&mut Init { store: &mut store, rng: &mut ChaCha8Rng::seed_from_u64(23) }, "iaf", 3, 4);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let y = tape.constant(random(&[4, 5, 5], 24, -1.0, 1.0));
    for s in 0..3 {
        let out = iaf.inject(&ctx, y, tape.constant(random(&[3, 5, 5], 25 + s, -3.0, 3.0))).unwrap();
        ensure(*out.value() == *y.value(), "zero-initialised injection changed its input")?;
    }

    let (b, mut store) = ffab_block(FfabConfig { channels: 8, num_heads: 4, window_base: 2, fft_block: 4 }, 26);
    b.zero_branch(&mut store);
    let ctx = Ctx::new(&tape, &store);
    let x = random(&[8, 7, 5], 27, -1.0, 1.0);
    ensure(*b.forward(&ctx, tape.constant(x.clone())).unwrap().value() == x, "zero-branch block is not the identity")?;

    let d = DiffusionConfig::default();
    let sched = make_schedule(d.train_steps, d.beta_start, d.beta_end).unwrap();
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let z0 = normal(&[3, 5, 6], 200 + case);
        let eps = normal(&[3, 5, 6], 300 + case);
        let t = rng.random_range(1..=sched.steps());
        let zt = add_noise(&z0, t, &eps, &sched).unwrap();
        let ab = sched.alpha_bar(t);
        let exact = zt.zip_map(&z0, |z, x0| (z - ab.sqrt() * x0) / (1.0 - ab).sqrt());
        worst = worst.max(ddim_step(&zt, &exact, t, 0, &sched).unwrap().max_rel_diff(&z0, 1e-3));
    }
    ensure(worst <= 1e-5, format!("DDIM inversion relative error {worst:.2e}"))?;
    Ok(format!("100 window round trips exact; Parseval {parseval:.1e}; IAF and FFAB zero-init exact; DDIM inversion {worst:.1e}"))
}

/// Direct O(N²) DFT of each channel plane.
fn dft_planes(t: &Tensor<f64>) -> Vec<(f64, f64)> {
    let (c, h, w) = t.dims3();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let p = t.channel(ch);
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let a = -std::f64::consts::TAU * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += p[y * w + x] * a.cos();
                        im += p[y * w + x] * a.sin();
                    }
                }
                out.push((re, im));
            }
        }
    }
    out
}

fn loss_semantics() -> Check {
    let tape = Tape::<f64>::inference();
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let a = random(&[3, 8, 6], 30, -1.0, 1.0);
    ensure(spatial_loss(c(&a), c(&a)).unwrap().item() == 0.0, "spatial loss of identical inputs")?;
    ensure(frequency_loss(c(&a), c(&a)).unwrap().item() == 0.0, "frequency loss of identical inputs")?;
    for s in 0..50 {
        let (p, q) = (random(&[2, 5, 7], 400 + s, -2.0, 2.0), random(&[2, 5, 7], 500 + s, -2.0, 2.0));
        ensure(spatial_loss(c(&p), c(&q)).unwrap().item() >= 0.0 && frequency_loss(c(&p), c(&q)).unwrap().item() >= 0.0, "negative loss")?;
    }

    // zero-mean planes so the DC bins drop out of the phase sum
    let mut t = random(&[2, 6, 8], 31, -1.0, 1.0);
    for ch in 0..2 {
        let plane = &mut t.data_mut()[ch * 48..(ch + 1) * 48];
        let mean = plane.iter().sum::<f64>() / 48.0;
        plane.iter_mut().for_each(|v| *v -= mean);
    }
    let spec = dft_planes(&t);
    let active = spec.iter().filter(|(re, im)| re.hypot(*im) >= ZERO_AMPLITUDE).count() as f64;
    let want = 4.0 * active / spec.len() as f64;
    let got = frequency_loss(c(&t.map(|v| -v)), c(&t)).unwrap().item();
    ensure((got - want).abs() <= 1e-5, format!("negated target: {got} vs closed form {want}"))?;

    let m: Model<f64> = Model::new(tiny_config(), 32).unwrap();
    let x = random(&[3, 32, 32], 33, 0.0, 1.0);
    let weights = LossWeights::new(0.7, 1.3, 0.2, 0.9).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &m.params);
    let l = total_loss(&m, &ctx, &m.pad(&x).unwrap(), 1024, &weights, &mut ChaCha8Rng::seed_from_u64(34)).unwrap();
    let recomposed: f64 = l.report.terms().iter().zip(weights.as_array()).map(|(t, w)| t * w).sum();
    let gap = (recomposed - l.total.item()).abs();
    ensure(gap <= 1e-6 * l.total.item().abs().max(1.0), format!("recomposition gap {gap:.2e}"))?;
    Ok(format!("identities exact; negated-target phase {got:.6} vs {want:.6}; recomposition gap {gap:.1e}"))
}

fn desk_training(fx: &Fixture) -> Check {
    let losses = &fx.codec_losses;
    ensure(losses.len() >= 200, format!("only {} codec steps", losses.len()))?;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let at100 = mean(&losses[..100]);
    let last = mean(&losses[losses.len() - 100..]);
    let fall = 1.0 - last / at100;
    let images = held_out_images::<f32>(8, 64);
    let (bpp0, psnr0) = rd_point(&fx.untrained, &images);
    let (bpp1, psnr1) = rd_point(&fx.trained, &images);
    let (bpp_lo, psnr_lo) = rd_point(&fx.low_rate_weight, &images);
    let detail = format!(
        "loss fell {:.1}%; untrained {bpp0:.3} bpp / {psnr0:.2} dB, trained {bpp1:.3} bpp / {psnr1:.2} dB; λ1=0.25 {bpp_lo:.3} bpp / {psnr_lo:.2} dB; {:.0} s",
        fall * 100.0,
        fx.seconds
    );
    ensure(fall >= 0.2, format!("smoothed loss fell only {:.1}%; {detail}", fall * 100.0))?;
    ensure(psnr1 > psnr0 && bpp1 < bpp0, format!("trained codec does not dominate; {detail}"))?;
    ensure(bpp_lo > bpp1, format!("rate order violated; {detail}"))?;
    ensure(fx.seconds < 1800.0, format!("training too slow; {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// binary-driven criteria

fn ffabic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffabic")).args(args).env("RUST_LOG", "warn").output().expect("spawn ffabic")
}

fn ok(args: &[&str]) -> Result<Output, String> {
    let out = ffabic(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("`ffabic {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(bytes: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    h.finish()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_default()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    images: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut cfg = Config::default();
    cfg.train = TrainConfig {
        seed: 7,
        batch_size: 1,
        crop: 32,
        prior_steps: 3,
        codec_steps: 6,
        denoiser_steps: 3,
        checkpoint_every: 4,
        calibration_images: 2,
        ..TrainConfig::default()
    };
    let config = root.join("config.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let images = root.join("images");
    std::fs::create_dir_all(&images).unwrap();
    for i in 0..2 {
        write_png(&images.join(format!("img{i}.png")), &synthetic_image::<f32>(0xACCE_0000 + i, 64, 64)).unwrap();
    }
    Workspace { _dir: dir, root, config, images }
}

fn determinism(ws: &Workspace) -> Check {
    let (a, b) = (ws.root.join("run_a"), ws.root.join("run_b"));
    for dir in [&a, &b] {
        ok(&["train", "--config", s(&ws.config), "--out", s(dir), "--seed", "7"])?;
    }
    let mut files = Vec::new();
    for stage in ["stage1", "stage2", "stage3"] {
        let name = format!("metrics-{stage}.tsv");
        let (fa, fb) = (read(&a.join(&name)), read(&b.join(&name)));
        ensure(!fa.is_empty() && fa == fb, format!("{name} differs between runs"))?;
        files.push(name);
    }
    ensure(read(&a.join("model.ckpt")) == read(&b.join("model.ckpt")), "final checkpoints differ")?;

    // interrupted stage 2: restart from the step-4 resume checkpoint of run a
    let c = ws.root.join("run_c");
    std::fs::create_dir_all(&c).unwrap();
    for f in ["prior.ckpt", "resume-stage2.ckpt", "metrics-stage2.tsv"] {
        std::fs::copy(a.join(f), c.join(f)).unwrap();
    }
    let metrics = String::from_utf8(read(&c.join("metrics-stage2.tsv"))).unwrap();
    let kept: Vec<&str> = metrics.lines().take(5).collect();
    std::fs::write(c.join("metrics-stage2.tsv"), kept.join("\n") + "\n").unwrap();
    ok(&["train", "--config", s(&ws.config), "--out", s(&c), "--seed", "7", "--stage", "2", "--resume", s(&c.join("resume-stage2.ckpt"))])?;
    ensure(read(&c.join("codec.ckpt")) == read(&a.join("codec.ckpt")), "resumed codec checkpoint differs")?;
    ensure(read(&c.join("metrics-stage2.tsv")) == read(&a.join("metrics-stage2.tsv")), "resumed metrics differ")?;

    let model = a.join("model.ckpt");
    let img = ws.images.join("img0.png");
    let mut hashes = Vec::new();
    for run in 0..2 {
        let (stream, rec) = (ws.root.join(format!("x{run}.ffab")), ws.root.join(format!("x{run}.png")));
        ok(&["compress", "--model", s(&model), "-i", s(&img), "-o", s(&stream)])?;
        ok(&["decompress", "--model", s(&model), "-i", s(&stream), "-o", s(&rec), "--seed", "3", "--steps", "2"])?;
        hashes.push((digest(&read(&stream)), digest(&read(&rec))));
    }
    ensure(hashes[0] == hashes[1], "coding output hashes differ between runs")?;
    Ok(format!("{} identical, resume reproduces stage 2, stream {:016x} image {:016x}", files.join(" "), hashes[0].0, hashes[0].1))
}

fn write_curve(path: &Path, label: &str, pts: &[(f64, f64)]) {
    let mut s = String::from("label\tbpp\tmetric\tvalue\n");
    for (bpp, q) in pts {
        s += &format!("{label}\t{bpp}\tpsnr\t{q}\n");
    }
    std::fs::write(path, s).unwrap();
}

fn bd_rate_oracle(ws: &Workspace) -> Check {
    let base = [(0.1, 26.0), (0.2, 29.0), (0.4, 31.5), (0.8, 33.0)];
    let (anchor, doubled, disjoint) = (ws.root.join("anchor.tsv"), ws.root.join("doubled.tsv"), ws.root.join("disjoint.tsv"));
    write_curve(&anchor, "anchor", &base);
    write_curve(&doubled, "doubled", &base.map(|(b, q)| (2.0 * b, q)));
    write_curve(&disjoint, "disjoint", &[(0.1, 40.0), (0.2, 42.0)]);
    let text = |o: Output| String::from_utf8_lossy(&o.stdout).trim().to_string();
    let same = text(ok(&["bd-rate", "--anchor", s(&anchor), "--test", s(&anchor)])?);
    ensure(same == "+0.000%" || same == "-0.000%", format!("identical curves gave {same}"))?;
    let twice = text(ok(&["bd-rate", "--anchor", s(&anchor), "--test", s(&doubled)])?);
    let v: f64 = twice.trim_end_matches('%').parse().map_err(|_| format!("unparsable output {twice}"))?;
    ensure((v - 100.0).abs() <= 0.1, format!("doubled rate gave {twice}"))?;
    let out = ffabic(&["bd-rate", "--anchor", s(&anchor), "--test", s(&disjoint)]);
    let err = String::from_utf8_lossy(&out.stderr);
    ensure(
        out.status.code() == Some(2) && err.contains("range"),
        format!("disjoint curves: status {:?}, stderr {err}", out.status.code()),
    )?;
    Ok(format!("identical {same}, doubled {twice}, disjoint rejected with a range error"))
}

fn band_tooling(ws: &Workspace) -> Check {
    let model = ws.root.join("run_a").join("model.ckpt");
    if !model.exists() {
        return Err("no trained model from the determinism run".into());
    }
    let out = ws.root.join("bands");
    ok(&["bands", "--model", s(&model), "-i", s(&ws.images.join("img1.png")), "--out", s(&out)])?;
    let cfg = ModelConfig::toy().codec;
    let blocks = cfg.stages() * cfg.stage_depth;
    let pngs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    ensure(pngs == 4 * blocks, format!("{pngs} maps for {blocks} blocks"))?;
    let index = String::from_utf8(read(&out.join("bands.tsv"))).unwrap();
    let (k, sb) = (cfg.ffab.num_heads, cfg.ffab.window_base);
    let rows: Vec<Vec<&str>> = index.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    ensure(rows.len() == 4 * blocks, "bands.tsv row count")?;
    for row in &rows {
        let g = ["LL", "HH", "HL", "LH"].iter().position(|b| *b == row[1]).ok_or("unknown band")?;
        // group g holds heads g·K/4 .. (g+1)·K/4 and attends in its band's window
        let heads: Vec<String> = (g * k / 4..(g + 1) * k / 4).map(|h| h.to_string()).collect();
        ensure(row[2] == heads.join(","), format!("{} {}: heads {}", row[0], row[1], row[2]))?;
        let (big, small) = (2 * sb, sb / 2);
        let win = [(big, big), (small, small), (big, small), (small, big)][g];
        ensure(row[3] == format!("{}x{}", win.0, win.1), format!("{} {}: window {}", row[0], row[1], row[3]))?;
        ensure(out.join(format!("{}_{}.png", row[0], row[1])).exists(), "missing map file")?;
        ensure(Band::ALL[g].label() == row[1], "band order")?;
    }

    let tsv = ws.root.join("ablation.tsv");
    ok(&["ablate-windows", "--config", s(&ws.config), "--dir", s(&ws.images), "--out", s(&tsv)])?;
    let text = String::from_utf8(read(&tsv)).unwrap();
    let bases: Vec<&str> = text.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    ensure(bases == ["2", "4", "8"], format!("ablation rows {bases:?}"))?;
    ensure(
        text.lines().skip(1).all(|l| l.split('\t').skip(1).take(2).all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))),
        "non-finite ablation scores",
    )?;
    Ok(format!("{pngs} maps for {blocks} blocks with head groups matching the band split; ablation rows for s = 2, 4, 8"))
}

// ---------------------------------------------------------------------------

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(e) => ("FAIL", e.as_str()),
    };
    let line = format!("criterion {n} {tag}: {name}: {detail} [{:.1} s]\n", t0.elapsed().as_secs_f64());
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    std::io::stdout().flush().unwrap();
    outcome.is_ok()
}

fn main() {
    // `cargo test -- --list` and friends
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let fixture = catch_unwind(train_fixture).ok();
    let needs = |f: &dyn Fn(&Fixture) -> Check| -> Check {
        match &fixture {
            Some(fx) => f(fx),
            None => Err("toy training fixture failed".into()),
        }
    };
    let ws = workspace();
    let results = [
        run(1, "lossless coding", || needs(&lossless_coding)),
        run(2, "rate fidelity", || needs(&rate_fidelity)),
        run(3, "gradient suite", gradient_suite),
        run(4, "structural identities", structural_identities),
        run(5, "loss semantics", loss_semantics),
        run(6, "desk-scale training", || needs(&desk_training)),
        run(7, "determinism", || determinism(&ws)),
        run(8, "BD-rate oracle", || bd_rate_oracle(&ws)),
        run(9, "band tooling", || band_tooling(&ws)),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
