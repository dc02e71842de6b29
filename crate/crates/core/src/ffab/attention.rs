//! Four-band window self-attention over `[C, H, W]` feature maps.

use crate::autograd::Var;
use crate::numerics::WindowSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Band, BandShapes};

/// Geometry shared by the forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub struct AttnLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub bands: BandShapes,
}

impl AttnLayout {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn heads_per_band(&self) -> usize {
        self.heads / 4
    }

    /// Band and window of a zero-based head index.
    pub fn head_window(&self, head: usize) -> (Band, WindowSpec) {
        let band = Band::of_head(head, self.heads);
        (band, self.bands.get(band))
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Number of relative-position bias entries for a window.
pub fn bias_len(w: WindowSpec) -> usize {
    (2 * w.height - 1) * (2 * w.width - 1)
}

fn rel_index(w: WindowSpec, (yi, xi): (usize, usize), (yj, xj): (usize, usize)) -> usize {
    (yi + w.height - 1 - yj) * (2 * w.width - 1) + (xi + w.width - 1 - xj)
}

/// Tokens of every window that fall inside the unpadded plane; padded positions are masked out.
fn windows_of(layout: &AttnLayout, w: WindowSpec) -> Vec<Vec<(usize, usize)>> {
    let (h, wd) = (layout.height, layout.width);
    let mut out = Vec::new();
    for wy in 0..h.div_ceil(w.height) {
        for wx in 0..wd.div_ceil(w.width) {
            let mut toks = Vec::with_capacity(w.tokens());
            for dy in 0..w.height {
                for dx in 0..w.width {
                    let (y, x) = (wy * w.height + dy, wx * w.width + dx);
                    if y < h && x < wd {
                        toks.push((y, x));
                    }
                }
            }
            out.push(toks);
        }
    }
    out
}

struct HeadView {
    base: usize,
    dim: usize,
    plane: usize,
    width: usize,
}

impl HeadView {
    fn at(&self, d: usize, (y, x): (usize, usize)) -> usize {
        self.base + d * self.plane + y * self.width + x
    }
}

fn softmax_row<T: Scalar>(logits: &mut [T]) {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    logits.iter_mut().for_each(|v| *v /= s);
}

/// Attention probabilities of one window for one head (row = query).
fn window_probs<T: Scalar>(q: &[T], k: &[T], bias: &[T], hv: &HeadView, toks: &[(usize, usize)], w: WindowSpec, scale: T) -> Vec<T> {
    let n = toks.len();
    let mut a = vec![T::zero(); n * n];
    for (i, &ti) in toks.iter().enumerate() {
        let row = &mut a[i * n..(i + 1) * n];
        for (j, &tj) in toks.iter().enumerate() {
            let mut dot = T::zero();
            for d in 0..hv.dim {
                dot += q[hv.at(d, ti)] * k[hv.at(d, tj)];
            }
            row[j] = dot * scale + bias[rel_index(w, ti, tj)];
        }
        softmax_row(row);
    }
    a
}

/// Bias table slice for one head inside its band's `[heads_per_band, bias_len]` table.
fn head_bias<'a, T>(tables: &'a [std::rc::Rc<Tensor<T>>; 4], layout: &AttnLayout, head: usize) -> &'a [T]
where
    T: Scalar,
{
    let (band, w) = layout.head_window(head);
    let local = head % layout.heads_per_band();
    let len = bias_len(w);
    &tables[band.index()].data()[local * len..(local + 1) * len]
}

/// Per-window attention weights for one head, for inspection.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    bias: &[Tensor<T>; 4],
    layout: &AttnLayout,
    head: usize,
) -> Vec<(Vec<(usize, usize)>, Vec<T>)> {
    let (_, w) = layout.head_window(head);
    let hv = HeadView {
        base: head * layout.head_dim() * layout.height * layout.width,
        dim: layout.head_dim(),
        plane: layout.height * layout.width,
        width: layout.width,
    };
    let tables = bias.clone().map(std::rc::Rc::new);
    let b = head_bias(&tables, layout, head);
    let scale = T::from_f64c(layout.scale());
    windows_of(layout, w)
        .into_iter()
        .map(|toks| {
            let a = window_probs(q.data(), k.data(), b, &hv, &toks, w, scale);
            (toks, a)
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Multi-head window attention; `self` holds the queries. Heads are grouped into
    /// LL, HH, HL, LH bands in order, each band attending inside its own window shape.
    pub fn band_window_attention(&self, keys: Var<'t, T>, values: Var<'t, T>, bias: [Var<'t, T>; 4], layout: AttnLayout) -> Var<'t, T> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let tables = bias.map(|b| b.value());
        let (hgt, wid) = (layout.height, layout.width);
        let plane = hgt * wid;
        let dim = layout.head_dim();
        let scale = T::from_f64c(layout.scale());
        let mut out = vec![T::zero(); layout.channels * plane];
        for head in 0..layout.heads {
            let (_, w) = layout.head_window(head);
            let hv = HeadView { base: head * dim * plane, dim, plane, width: wid };
            let b = head_bias(&tables, &layout, head);
            for toks in windows_of(&layout, w) {
                let a = window_probs(q.data(), k.data(), b, &hv, &toks, w, scale);
                let n = toks.len();
                for (i, &ti) in toks.iter().enumerate() {
                    for d in 0..dim {
                        let mut s = T::zero();
                        for (j, &tj) in toks.iter().enumerate() {
                            s += a[i * n + j] * v.data()[hv.at(d, tj)];
                        }
                        out[hv.at(d, ti)] = s;
                    }
                }
            }
        }
        let shape = vec![layout.channels, hgt, wid];
        let parents = [*self, keys, values, bias[0], bias[1], bias[2], bias[3]];
        let out_shape = shape.clone();
        self.tape().op(Tensor::from_parts(out_shape, out), &parents, move |g| {
            let gd = g.data();
            let mut dq = vec![T::zero(); q.len()];
            let mut dk = vec![T::zero(); k.len()];
            let mut dv = vec![T::zero(); v.len()];
            let mut dbias: Vec<Vec<T>> = tables.iter().map(|t| vec![T::zero(); t.len()]).collect();
            for head in 0..layout.heads {
                let (band, w) = layout.head_window(head);
                let hv = HeadView { base: head * dim * plane, dim, plane, width: wid };
                let b = head_bias(&tables, &layout, head);
                let blen = bias_len(w);
                let boff = (head % layout.heads_per_band()) * blen;
                for toks in windows_of(&layout, w) {
                    let a = window_probs(q.data(), k.data(), b, &hv, &toks, w, scale);
                    let n = toks.len();
                    for (i, &ti) in toks.iter().enumerate() {
                        // dA_ij = <g_i, v_j>; dV_j += A_ij g_i
                        let mut da = vec![T::zero(); n];
                        for (j, &tj) in toks.iter().enumerate() {
                            let aij = a[i * n + j];
                            let mut s = T::zero();
                            for d in 0..dim {
                                let gi = gd[hv.at(d, ti)];
                                s += gi * v.data()[hv.at(d, tj)];
                                dv[hv.at(d, tj)] += aij * gi;
                            }
                            da[j] = s;
                        }
                        let dot = (0..n).fold(T::zero(), |acc, j| acc + a[i * n + j] * da[j]);
                        for (j, &tj) in toks.iter().enumerate() {
                            let dl = a[i * n + j] * (da[j] - dot);
                            dbias[band.index()][boff + rel_index(w, ti, tj)] += dl;
                            let dls = dl * scale;
                            for d in 0..dim {
                                dq[hv.at(d, ti)] += dls * k.data()[hv.at(d, tj)];
                                dk[hv.at(d, tj)] += dls * q.data()[hv.at(d, ti)];
                            }
                        }
                    }
                }
            }
            let mut res = vec![
                Some(Tensor::from_parts(shape.clone(), dq)),
                Some(Tensor::from_parts(shape.clone(), dk)),
                Some(Tensor::from_parts(shape.clone(), dv)),
            ];
            for (t, db) in tables.iter().zip(dbias) {
                res.push(Some(Tensor::from_parts(t.shape().to_vec(), db)));
            }
            res
        })
    }
}
