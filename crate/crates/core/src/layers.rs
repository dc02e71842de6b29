//! Differentiable spatial kernels on `[C, H, W]` tensors.

use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut col = vec![T::zero(); g.cin * g.k * g.k * p];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = (c * g.h + iy as usize) * g.w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            col[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = (c * g.h + iy as usize) * g.w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[dst + ix as usize] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Plain convolution on tensors: `x [Cin,H,W]`, `w [Cout,Cin,k,k]`, optional bias `[Cout]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let (cin, h, wd) = x.dims3();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,k,k]");
    assert_eq!(ws[1], cin, "conv input channels");
    let (cout, k) = (ws[0], ws[2]);
    let g = ConvGeom { cin, h, w: wd, k, stride, pad };
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = cin * k * k;
    let mut out = vec![T::zero(); cout * p];
    if let Some(b) = b {
        for (co, plane) in out.chunks_mut(p).enumerate() {
            plane.iter_mut().for_each(|v| *v = b.data()[co]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(cout, kk, p, T::one(), w.data(), (kk as isize, 1), x.data(), (p as isize, 1), beta, &mut out, (p as isize, 1));
    } else {
        let col = im2col(x.data(), &g);
        T::gemm(cout, kk, p, T::one(), w.data(), (kk as isize, 1), &col, (p as isize, 1), beta, &mut out, (p as isize, 1));
    }
    Tensor::from_parts(vec![cout, ho, wo], out)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Zero-padded 2-D convolution.
    pub fn conv2d(&self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = conv2d_forward(&x, &w, b.as_deref(), stride, pad);
        let (cin, h, wd) = x.dims3();
        let ws = w.shape().to_vec();
        let (cout, k) = (ws[0], ws[2]);
        let g = ConvGeom { cin, h, w: wd, k, stride, pad };
        let (ho, wo) = g.out_hw();
        let p = ho * wo;
        let kk = cin * k * k;
        let mut parents = vec![*self, weight];
        if let Some(bv) = bias {
            parents.push(bv);
        }
        let has_bias = bias.is_some();
        self.tape().op(out, &parents, move |grad| {
            let gd = grad.data();
            let pointwise = g.is_pointwise();
            let col_owned;
            let col: &[T] = if pointwise {
                x.data()
            } else {
                col_owned = im2col(x.data(), &g);
                &col_owned
            };
            let mut dw = vec![T::zero(); cout * kk];
            T::gemm(cout, p, kk, T::one(), gd, (p as isize, 1), col, (1, p as isize), T::zero(), &mut dw, (kk as isize, 1));
            let mut dcol = vec![T::zero(); kk * p];
            T::gemm(kk, cout, p, T::one(), w.data(), (1, kk as isize), gd, (p as isize, 1), T::zero(), &mut dcol, (p as isize, 1));
            let dx = if pointwise { dcol } else { col2im(&dcol, &g) };
            let mut res = vec![Some(Tensor::from_parts(vec![cin, h, wd], dx)), Some(Tensor::from_parts(ws.clone(), dw))];
            if has_bias {
                let db = gd.chunks(p).map(|c| c.iter().fold(T::zero(), |s, &v| s + v)).collect();
                res.push(Some(Tensor::from_parts(vec![cout], db)));
            }
            res
        })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&self) -> Var<'t, T> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.tape().op(Tensor::from_parts(vec![c, 2 * h, 2 * w], out), &[*self], move |g| {
            let mut dx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
        })
    }

    /// 2×2 average pooling; odd trailing rows/columns are averaged over what exists.
    pub fn avg_pool2(&self) -> Var<'t, T> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let counts: Vec<T> = (0..ho * wo)
            .map(|i| {
                let (oy, ox) = (i / wo, i % wo);
                let n = (2 * oy + 2).min(h) - 2 * oy;
                let m = (2 * ox + 2).min(w) - 2 * ox;
                T::from_usize(n * m).unwrap()
            })
            .collect();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * ho + y / 2) * wo + xx / 2] += x.data()[(ch * h + y) * w + xx];
                }
            }
            for i in 0..ho * wo {
                out[ch * ho * wo + i] /= counts[i];
            }
        }
        self.tape().op(Tensor::from_parts(vec![c, ho, wo], out), &[*self], move |g| {
            let mut dx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let o = (y / 2) * wo + xx / 2;
                        dx[(ch * h + y) * w + xx] = g.data()[ch * ho * wo + o] / counts[o];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
        })
    }

    /// Layer normalisation across channels at each pixel, with per-channel affine.
    pub fn layer_norm_channels(&self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let eps = T::from_f64c(1e-5);
        let cn = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); c * hw];
        let mut inv_std = vec![T::zero(); hw];
        for p in 0..hw {
            let mean = (0..c).fold(T::zero(), |s, ch| s + x.data()[ch * hw + p]) / cn;
            let var = (0..c).fold(T::zero(), |s, ch| {
                let d = x.data()[ch * hw + p] - mean;
                s + d * d
            }) / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                xhat[ch * hw + p] = (x.data()[ch * hw + p] - mean) * is;
            }
        }
        let (gm, bt) = (gamma.value(), beta.value());
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = xhat[ch * hw + p] * gm.data()[ch] + bt.data()[ch];
            }
        }
        self.tape().op(Tensor::from_parts(vec![c, h, w], out), &[*self, gamma, beta], move |g| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); c * hw];
            for p in 0..hw {
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for ch in 0..c {
                    let i = ch * hw + p;
                    dgamma[ch] += gd[i] * xhat[i];
                    dbeta[ch] += gd[i];
                    let dxh = gd[i] * gm.data()[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[i];
                }
                for ch in 0..c {
                    let i = ch * hw + p;
                    let dxh = gd[i] * gm.data()[ch];
                    dx[i] = inv_std[p] * (dxh - sum_dxh / cn - xhat[i] * sum_dxh_xh / cn);
                }
            }
            vec![
                Some(Tensor::from_parts(vec![c, h, w], dx)),
                Some(Tensor::from_parts(vec![c], dgamma)),
                Some(Tensor::from_parts(vec![c], dbeta)),
            ]
        })
    }

    /// Replicate-pads bottom/right up to `(th, tw)`.
    pub fn replicate_pad(&self, th: usize, tw: usize) -> Var<'t, T> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        assert!(th >= h && tw >= w);
        let src = move |y: usize, xx: usize| (y.min(h - 1), xx.min(w - 1));
        let mut out = vec![T::zero(); c * th * tw];
        for ch in 0..c {
            for y in 0..th {
                for xx in 0..tw {
                    let (sy, sx) = src(y, xx);
                    out[(ch * th + y) * tw + xx] = x.data()[(ch * h + sy) * w + sx];
                }
            }
        }
        self.tape().op(Tensor::from_parts(vec![c, th, tw], out), &[*self], move |g| {
            let mut dx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..th {
                    for xx in 0..tw {
                        let (sy, sx) = src(y, xx);
                        dx[(ch * h + sy) * w + sx] += g.data()[(ch * th + y) * tw + xx];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
        })
    }

    /// Keeps the top-left `h × w` region.
    pub fn crop(&self, h: usize, w: usize) -> Var<'t, T> {
        let x = self.value();
        let (c, hi, wi) = x.dims3();
        assert!(h <= hi && w <= wi);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * hi + y) * wi;
                out.extend_from_slice(&x.data()[s..s + w]);
            }
        }
        self.tape().op(Tensor::from_parts(vec![c, h, w], out), &[*self], move |g| {
            let mut dx = vec![T::zero(); c * hi * wi];
            for ch in 0..c {
                for y in 0..h {
                    let d = (ch * hi + y) * wi;
                    dx[d..d + w].copy_from_slice(&g.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
                }
            }
            vec![Some(Tensor::from_parts(vec![c, hi, wi], dx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (cin, h, wd) = x.dims3();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn(&[cout, ho, wo], |i| {
            let (co, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
            let mut s = 0.0;
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += w.data()[((co * cin + ci) * k + ky) * k + kx] * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = random(&[3, 7, 6], 1);
        for &(k, s, p) in &[(5, 2, 2), (3, 1, 1), (1, 1, 0)] {
            let w = random(&[4, 3, k, k], 2);
            let got = conv2d_forward(&x, &w, None, s, p);
            assert!(got.max_rel_diff(&naive_conv(&x, &w, s, p), 1.0) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let x = random(&[2, 5, 6], 3);
        let w = random(&[3, 2, 3, 3], 4);
        let b = random(&[3], 5);
        let probe = random(&[3, 3, 3], 6);
        let (w2, b2, p2) = (w.clone(), b.clone(), probe.clone());
        let err = grad_check(
            move |xv| {
                let t = xv.tape();
                let y = xv.conv2d(t.constant(w2.clone()), Some(t.constant(b2.clone())), 2, 1);
                y.mul(t.constant(p2.clone())).sum()
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "dx {err}");
        let err = grad_check(
            move |wv| {
                let t = wv.tape();
                let y = t.constant(x.clone()).conv2d(wv, Some(t.constant(b.clone())), 2, 1);
                y.mul(t.constant(probe.clone())).sum()
            },
            &w,
        )
        .unwrap();
        assert!(err < 1e-6, "dw {err}");
    }

    #[test]
    fn spatial_ops_gradients() {
        let x = random(&[3, 5, 7], 7);
        let p_up = random(&[3, 10, 14], 8);
        let p_pool = random(&[3, 3, 4], 9);
        let p_pad = random(&[3, 8, 8], 10);
        let err = grad_check(
            move |xv| {
                let t = xv.tape();
                let a = xv.upsample2().mul(t.constant(p_up.clone())).sum();
                let b = xv.avg_pool2().mul(t.constant(p_pool.clone())).sum();
                let c = xv.replicate_pad(8, 8).mul(t.constant(p_pad.clone())).sum();
                let d = xv.crop(4, 3).square().sum();
                a.add(b).add(c).add(d)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradients_and_statistics() {
        let x = random(&[4, 3, 3], 11);
        let gamma = random(&[4], 12);
        let probe = random(&[4, 3, 3], 13);
        let err = grad_check(
            move |xv| {
                let t = xv.tape();
                let beta = t.constant(Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
                xv.layer_norm_channels(t.constant(gamma.clone()), beta).mul(t.constant(probe.clone())).sum()
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        let tape = Tape::<f64>::new();
        let y = tape
            .constant(random(&[5, 2, 2], 14))
            .layer_norm_channels(tape.constant(Tensor::ones(&[5])), tape.constant(Tensor::zeros(&[5])))
            .value();
        for p in 0..4 {
            let m: f64 = (0..5).map(|c| y.data()[c * 4 + p]).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12);
        }
    }
}
