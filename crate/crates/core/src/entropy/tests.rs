use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::autograd::Tape;
use crate::error::Error;
use crate::numerics::grad_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Composite Simpson integral of the standard normal density, independent of erf.
fn normal_mass(a: f64, b: f64) -> f64 {
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn rounding_ties_go_away_from_zero() {
    let v = Tensor::from_f64(&[4], &[0.4, -1.5, 1.5, -0.4]).unwrap();
    let q = quantize::<f64, _>(&v, QuantMode::Round, None, &mut rng(0));
    assert_eq!(q.data(), &[0.0, -2.0, 2.0, -0.0]);
}

#[test]
fn mean_offset_quantization() {
    let v = Tensor::from_f64(&[1], &[1.3]).unwrap();
    let o = Tensor::from_f64(&[1], &[1.1]).unwrap();
    let q: Tensor<f64> = quantize(&v, QuantMode::Round, Some(&o), &mut rng(0));
    assert!((q.data()[0] - 1.1).abs() < 1e-15);
}

#[test]
fn noise_stays_within_half_a_step() {
    let mut r = rng(3);
    let v = Tensor::<f32>::from_fn(&[4, 16, 16], |_| r.random_range(-20.0..20.0));
    let q = quantize(&v, QuantMode::Noise, None, &mut r);
    let max = v.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(max <= 0.5, "{max}");
    assert!(max > 0.3);
}

#[test]
fn ste_forward_rounds_and_gradient_passes() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[0.2, 1.7, -2.5]).unwrap());
    let mu = tape.constant(Tensor::from_f64(&[3], &[0.1, 0.1, 0.1]).unwrap());
    let q = x.quantize(QuantMode::Ste, Some(mu), &mut rng(0));
    let expect = [0.1, 0.1 + 2.0, 0.1 - 3.0];
    for (a, b) in q.value().data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let g = tape.backward(q.sum());
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn slice_layouts() {
    assert_eq!(slice_layout(48).unwrap().sizes(), &[2, 2, 4, 4, 4, 4, 6, 6, 8, 8]);
    assert_eq!(slice_layout(192).unwrap().sizes(), &[8, 8, 16, 16, 16, 16, 24, 24, 32, 32]);
    for k in 1..20 {
        let l = slice_layout(24 * k).unwrap();
        assert_eq!(l.len(), 10);
        assert_eq!(l.total(), 24 * k);
    }
    assert!(matches!(slice_layout(50), Err(Error::Config(_))));
    assert!(matches!(slice_layout(0), Err(Error::Config(_))));
}

#[test]
fn unit_gaussian_zero_symbol_cost() {
    let bits = gaussian_bits(0.0, 1.0).0;
    let oracle = -normal_mass(-0.5, 0.5).log2();
    assert!((bits - oracle).abs() < 1e-9, "{bits} vs {oracle}");
    assert!((bits - 1.384_866_534_290_99).abs() < 1e-9);
}

#[test]
fn gaussian_mass_matches_quadrature_in_the_tails() {
    for &(r, s) in &[(3.0, 0.7), (-6.0, 1.3), (12.0, 2.0), (0.25, 0.3), (-40.0, 9.0)] {
        let oracle = normal_mass((r - 0.5) / s, (r + 0.5) / s);
        let got = gaussian_mass(r, s);
        assert!((got - oracle).abs() <= 1e-9 * oracle.max(1e-300) + 1e-15, "r={r} s={s}: {got} vs {oracle}");
    }
}

#[test]
fn sharp_gaussian_costs_almost_nothing() {
    let (bits, _, _) = gaussian_bits(0.0, SIGMA_MIN);
    assert_eq!(bits, BIT_FLOOR);
    assert!(gaussian_bits(0.0, 0.1).0 <= BIT_FLOOR);
    assert!(gaussian_bits(0.2, 0.1).0 < 0.01);
}

#[test]
fn rate_estimate_is_additive() {
    let mut r = rng(5);
    let n = Normal::new(0.0, 3.0).unwrap();
    let mk = |r: &mut ChaCha8Rng, len| {
        let v = Tensor::<f64>::from_fn(&[len], |_| {
            let x: f64 = n.sample(r);
            x.round()
        });
        let mu = Tensor::from_fn(&[len], |_| r.random_range(-1.0..1.0));
        let v = v.add(&mu);
        let s = Tensor::from_fn(&[len], |_| r.random_range(0.05..4.0));
        (v, GaussianParams::new(mu, s).unwrap())
    };
    let (va, pa) = mk(&mut r, 37);
    let (vb, pb) = mk(&mut r, 53);
    let cat = |a: &Tensor<f64>, b: &Tensor<f64>| Tensor::new(&[90], [a.data(), b.data()].concat()).unwrap();
    let whole = rate_estimate(&cat(&va, &vb), &GaussianParams::new(cat(&pa.mu, &pb.mu), cat(&pa.sigma, &pb.sigma)).unwrap());
    let parts = rate_estimate(&va, &pa) + rate_estimate(&vb, &pb);
    assert!((whole - parts).abs() < 1e-9 * whole);
}

#[test]
fn sigma_is_floored() {
    let p = GaussianParams::new(Tensor::zeros(&[3]), Tensor::from_f64(&[3], &[0.0, -1.0, 0.5]).unwrap()).unwrap();
    assert!(p.sigma.data().iter().all(|&s: &f64| s >= SIGMA_MIN));
}

#[test]
fn gaussian_bits_gradients() {
    let mut r = rng(8);
    let n = 24;
    let theta = Tensor::<f64>::from_fn(&[3 * n], |i| match i / n {
        0 => r.random_range(-4.0..4.0),
        1 => r.random_range(-1.0..1.0),
        _ => r.random_range(0.2..3.0),
    });
    let err = grad_check(
        move |t| {
            let v = t.narrow_flat(0, n);
            let mu = t.narrow_flat(n, n);
            let s = t.narrow_flat(2 * n, n);
            v.gaussian_bits(mu, s)
        },
        &theta,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn factorized_bits_gradients() {
    let mut r = rng(9);
    let (c, h, w) = (2, 3, 3);
    let len = c * h * w;
    let theta = Tensor::<f64>::from_fn(&[len + c * FACTORIZED_BINS], |i| {
        if i < len {
            // stay off the integer grid where the interpolant has kinks
            r.random_range(-5.0..5.0f64).floor() + r.random_range(0.1..0.9)
        } else {
            // a broad prior keeps every logit gradient well above the difference noise
            let k = ((i - len) % FACTORIZED_BINS) as f64 - 64.0;
            -0.5 * (k / 25.0).powi(2) + r.random_range(-0.3..0.3)
        }
    });
    let err = grad_check(
        move |t| {
            let z = t.narrow_flat(0, len).reshape_var(&[c, h, w]);
            let l = t.narrow_flat(len, c * FACTORIZED_BINS).reshape_var(&[c, FACTORIZED_BINS]);
            z.factorized_bits(l)
        },
        &theta,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

fn random_logits(c: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(&[c, FACTORIZED_BINS], |i| {
        let k = (i % FACTORIZED_BINS) as f64 - 64.0;
        -0.5 * (k / 2.5).powi(2) + r.random_range(-1.0..1.0)
    })
}

#[test]
fn factorized_tables_are_monotone_with_unit_mass() {
    let logits = random_logits(4, 1);
    for p in factorized_probs(&logits) {
        let mut cdf = 0.0;
        for &m in &p {
            assert!(m >= 0.0);
            let next = cdf + m;
            assert!(next >= cdf);
            cdf = next;
        }
        assert!(cdf >= 1.0 - 1e-4);
    }
    let model = FactorizedModel::new(&factorized_probs(&logits), 1).unwrap();
    for ch in 0..4 {
        let t = model.table(ch);
        assert!(t.cumulative().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*t.cumulative().last().unwrap(), 1 << PROB_BITS);
    }
}

#[test]
fn factorized_integer_cost_matches_the_op() {
    let logits = random_logits(3, 2);
    let mut r = rng(3);
    let z = Tensor::<f64>::from_fn(&[3, 4, 4], |_| r.random_range(-6i32..=6) as f64);
    let tape = Tape::inference();
    let op = tape.constant(z.clone()).factorized_bits(tape.constant(logits.clone())).item();
    let direct = factorized_bits(&z, &logits);
    assert!((op - direct).abs() < 1e-9 * direct);
}

#[test]
fn nonfinite_probabilities_are_rejected() {
    let mut p = vec![1.0 / 129.0; 129];
    p[3] = f64::NAN;
    assert!(FreqTable::from_probs(&p, 0.0).is_err());
    p[3] = -0.1;
    assert!(FreqTable::from_probs(&p, 0.0).is_err());
}

#[test]
fn gaussian_tables_give_every_symbol_mass() {
    for sigma in [0.04, 0.3, 1.0, 7.5, 80.0] {
        let t = FreqTable::gaussian(sigma);
        assert!(t.cumulative().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*t.cumulative().last().unwrap(), 1 << PROB_BITS);
    }
    // most probable symbol of a unit gaussian is zero
    let t = FreqTable::gaussian(1.0);
    let zero = t.freq(0);
    assert!((-TAIL..=TAIL).all(|k| t.freq(k) <= zero));
}

fn round_trip(symbols: &[i32], sigmas: Vec<f64>) -> Vec<u8> {
    let model = GaussianModel { sigmas };
    let bytes = encode_stream(symbols, &model).unwrap();
    let back = decode_stream(&bytes, symbols.len(), &model).unwrap();
    assert_eq!(back, symbols);
    bytes
}

#[test]
fn hundred_random_streams_round_trip() {
    let mut r = rng(11);
    for _ in 0..100 {
        let len = r.random_range(0..600);
        let sigmas: Vec<f64> = (0..len).map(|_| r.random_range(0.04..20.0)).collect();
        let symbols: Vec<i32> = sigmas
            .iter()
            .map(|&s| {
                let v = Normal::new(0.0, s).unwrap().sample(&mut r).round() as i32;
                // sprinkle in escapes and extreme magnitudes
                match r.random_range(0..50) {
                    0 => v + 300,
                    1 => -(r.random_range(65..65535)),
                    _ => v,
                }
            })
            .collect();
        round_trip(&symbols, sigmas);
    }
}

#[test]
fn in_model_streams_code_within_the_estimate() {
    let mut r = rng(15);
    for case in 0..100 {
        let len = r.random_range(0..2000);
        let sigmas: Vec<f64> = (0..len).map(|_| r.random_range(0.04..20.0)).collect();
        let symbols: Vec<i32> = sigmas
            .iter()
            .map(|&s| {
                let x: f64 = Normal::new(0.0, s).unwrap().sample(&mut r);
                x.round() as i32
            })
            .collect();
        let bytes = round_trip(&symbols, sigmas.clone());
        let est: f64 = symbols.iter().zip(&sigmas).map(|(&k, &s)| gaussian_bits(k as f64, s).0).sum();
        assert!(bytes.len() as f64 <= est / 8.0 + 32.0, "case {case}: {} bytes, estimate {} bits", bytes.len(), est);
    }
}

#[test]
fn empty_stream_is_tiny() {
    let bytes = round_trip(&[], vec![]);
    assert!(bytes.len() <= 32);
}

#[test]
fn iid_stream_codes_near_its_estimate() {
    let mut r = rng(12);
    let n = 50_000;
    let dist = Normal::new(0.0, 1.0).unwrap();
    let symbols: Vec<i32> = (0..n)
        .map(|_| {
            let x: f64 = dist.sample(&mut r);
            x.round() as i32
        })
        .collect();
    let bytes = round_trip(&symbols, vec![1.0; n]);
    let est: f64 = symbols.iter().map(|&k| gaussian_bits(k as f64, 1.0).0).sum();
    let per_symbol = est / n as f64;
    assert!((per_symbol - 2.1).abs() < 0.1, "{per_symbol}");
    assert!((bytes.len() as f64) <= est / 8.0 * 1.01 + 32.0, "{} bytes vs {} bits", bytes.len(), est);

    // unit-variance symbols of a sharper source, close to 1.385 bits each
    let symbols: Vec<i32> = (0..n).map(|_| if r.random_range(0.0..1.0) < 0.3829 { 0 } else { 1 - 2 * r.random_range(0..2) }).collect();
    let bytes = round_trip(&symbols, vec![1.0; n]);
    let est: f64 = symbols.iter().map(|&k| gaussian_bits(k as f64, 1.0).0).sum();
    assert!((bytes.len() as f64) <= est / 8.0 * 1.01 + 32.0);
}

#[test]
fn out_of_range_magnitudes() {
    let model = GaussianModel { sigmas: vec![1.0] };
    assert!(matches!(encode_stream(&[1 << 16], &model), Err(Error::Input(_))));
    assert!(round_trip(&[65535], vec![1.0]).len() <= 32);
}

#[test]
fn truncated_streams_fail_with_integrity_errors() {
    let mut r = rng(13);
    let symbols: Vec<i32> = (0..400).map(|_| r.random_range(-10..=10)).collect();
    let model = GaussianModel { sigmas: vec![4.0; 400] };
    let bytes = encode_stream(&symbols, &model).unwrap();
    let cut = &bytes[..bytes.len() / 2];
    assert!(matches!(decode_stream(cut, 400, &model), Err(Error::Integrity(_))));
    assert!(matches!(decode_stream(&[], 0, &model), Err(Error::Integrity(_))));
}

#[test]
fn factorized_stream_round_trip() {
    let logits = random_logits(3, 4);
    let model = FactorizedModel::new(&factorized_probs(&logits), 16).unwrap();
    let mut r = rng(14);
    let z: Vec<i32> = (0..48).map(|_| r.random_range(-4..=4)).collect();
    let bytes = encode_stream(&z, &model).unwrap();
    assert_eq!(decode_stream(&bytes, 48, &model).unwrap(), z);
    let zt = Tensor::<f64>::from_fn(&[3, 4, 4], |i| z[i] as f64);
    let est = factorized_bits(&zt, &logits);
    assert!(bytes.len() as f64 <= est / 8.0 * 1.01 + 32.0);
}

fn sample_bitstream() -> Bitstream {
    Bitstream {
        header: Header { flags: 0, width: 65, height: 48, down_factor: 8, latent_channels: 48, model_hash: 0xDEAD_BEEF_0123_4567 },
        z: vec![1, 2, 3],
        y: (0..10).map(|i| vec![i as u8; i]).collect(),
    }
}

#[test]
fn bitstream_layout_is_little_endian() {
    let b = sample_bitstream();
    let bytes = b.to_bytes().unwrap();
    assert_eq!(bytes.len(), b.len());
    assert_eq!(&bytes[..4], b"FFAB");
    assert_eq!(bytes[4], 1);
    assert_eq!(&bytes[6..10], &65u32.to_le_bytes());
    assert_eq!(&bytes[10..14], &48u32.to_le_bytes());
    assert_eq!(bytes[14], 8);
    assert_eq!(&bytes[15..17], &48u16.to_le_bytes());
    assert_eq!(&bytes[17..25], &0xDEAD_BEEF_0123_4567u64.to_le_bytes());
    assert_eq!(&bytes[25..29], &3u32.to_le_bytes());
    assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
}

#[test]
fn malformed_bitstreams_are_format_errors() {
    let bytes = sample_bitstream().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Format { position: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Format { position: 4, .. })));
    for cut in [3, 20, 30, bytes.len() - 1] {
        assert!(matches!(Bitstream::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Bitstream::from_bytes(&long), Err(Error::Format { .. })));
}

mod context {
    use super::*;
    use crate::nn::{Ctx, Init, ParamStore};

    fn setup() -> (SliceContext, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut r = rng(21);
        let c = SliceContext::new(&mut Init { store: &mut store, rng: &mut r }, "ctx", slice_layout(24).unwrap(), 6);
        (c, store)
    }

    fn slices(seed: u64, layout: &SliceLayout) -> Vec<Tensor<f64>> {
        let mut r = rng(seed);
        layout.sizes().iter().map(|&n| Tensor::from_fn(&[n, 4, 4], |_| r.random_range(-3i32..=3) as f64)).collect()
    }

    fn params_of(
        c: &SliceContext,
        store: &ParamStore<f64>,
        hyper: &Tensor<f64>,
        dec: &[Tensor<f64>],
        i: usize,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let dv: Vec<_> = dec.iter().map(|t| tape.constant(t.clone())).collect();
        let p = c.params(&ctx, tape.constant(hyper.clone()), &dv, i).unwrap();
        ((*p.mu.value()).clone(), (*p.sigma.value()).clone())
    }

    #[test]
    fn slice_params_are_causal() {
        let (c, store) = setup();
        let mut r = rng(22);
        let hyper = Tensor::from_fn(&[6, 4, 4], |_| r.random_range(-1.0..1.0));
        let base = slices(1, c.layout());
        for i in 0..10 {
            let (mu, sigma) = params_of(&c, &store, &hyper, &base, i);
            for j in 0..10 {
                let mut pert = base.clone();
                pert[j] = pert[j].map(|v| v + 1.0);
                let (mu2, sigma2) = params_of(&c, &store, &hyper, &pert, i);
                let changed = mu2 != mu || sigma2 != sigma;
                assert_eq!(changed, j < i, "slice {i}, perturbed {j}");
            }
        }
    }

    #[test]
    fn sigma_never_drops_below_the_floor() {
        let (c, mut store) = setup();
        // push every scale pre-activation far negative
        for (name, t) in store.iter_mut() {
            if name.ends_with(".out.b") {
                let half = t.len() / 2;
                t.data_mut()[half..].iter_mut().for_each(|v| *v = -50.0);
            }
        }
        let hyper = Tensor::full(&[6, 4, 4], 3.0);
        let dec = slices(2, c.layout());
        for i in 0..10 {
            let (_, sigma) = params_of(&c, &store, &hyper, &dec, i);
            assert!(sigma.data().iter().all(|&s| s >= SIGMA_MIN));
        }
    }

    #[test]
    fn out_of_order_requests_are_rejected() {
        let (c, store) = setup();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let hyper = tape.constant(Tensor::zeros(&[6, 4, 4]));
        let dec: Vec<_> = slices(3, c.layout())[..2].iter().map(|t| tape.constant(t.clone())).collect();
        assert!(matches!(c.params(&ctx, hyper, &dec, 3), Err(Error::Contract(_))));
        assert!(c.params(&ctx, hyper, &dec, 2).is_ok());
    }
}
