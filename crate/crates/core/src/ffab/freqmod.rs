//! Block-wise frequency modulation with a learnable real gain per frequency bin.

use num_complex::Complex;

use crate::autograd::Var;
use crate::numerics::{window_merge, window_partition, Fft2Plan, WindowSpec};
use crate::scalar::Scalar;
use crate::tensor::{ComplexTensor, Tensor};

/// Gains averaged with their conjugate-mirror bin so the filtered block stays real.
fn symmetric_gain<T: Scalar>(filter: &[T], b: usize) -> Vec<T> {
    let half = T::from_f64c(0.5);
    (0..b * b)
        .map(|i| {
            let (u, v) = (i / b, i % b);
            let mirror = ((b - u) % b) * b + (b - v) % b;
            (filter[i] + filter[mirror]) * half
        })
        .collect()
}

fn check_shapes(c: usize, filter: &[usize]) -> (usize, usize) {
    assert_eq!(filter.len(), 3, "freq filter must be [groups, b, b]");
    assert_eq!(filter[1], filter[2], "freq filter blocks are square");
    let groups = filter[0];
    assert!(c.is_multiple_of(groups), "channels {c} not divisible into {groups} filter groups");
    (groups, filter[1])
}

/// Filtered blocks before the real part is taken, `[n, C, b, b]` complex.
pub fn filter_blocks_complex<T: Scalar>(x: &Tensor<T>, filter: &Tensor<T>) -> (ComplexTensor<T>, crate::numerics::PadInfo) {
    let (c, _, _) = x.dims3();
    let (groups, b) = check_shapes(c, filter.shape());
    let per_group = c / groups;
    let (blocks, info) = window_partition(x, WindowSpec::square(b).expect("block size ≥ 1"));
    let plan = Fft2Plan::<T>::new(b, b);
    let gains: Vec<Vec<T>> = (0..groups).map(|g| symmetric_gain(&filter.data()[g * b * b..(g + 1) * b * b], b)).collect();
    let mut out = ComplexTensor::from_real(&blocks);
    for (i, plane) in out.data_mut().chunks_mut(b * b).enumerate() {
        let ch = i % c;
        plan.forward(plane);
        for (v, &gain) in plane.iter_mut().zip(&gains[ch / per_group]) {
            *v *= gain;
        }
        plan.inverse(plane);
    }
    (out, info)
}

fn filter_real<T: Scalar>(x: &Tensor<T>, filter: &Tensor<T>) -> Tensor<T> {
    let (blocks, info) = filter_blocks_complex(x, filter);
    window_merge(&blocks.re(), &info).expect("blocks from partition")
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Splits each channel into `b×b` blocks (zero-padded), scales every frequency bin of
    /// every block by the channel group's gain, and transforms back.
    pub fn block_frequency_filter(&self, filter: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let f = filter.value();
        let out = filter_real(&x, &f);
        self.tape().op(out, &[*self, filter], move |g| {
            let dx = filter_real(g, &f);
            let (c, _, _) = x.dims3();
            let (groups, b) = check_shapes(c, f.shape());
            let per_group = c / groups;
            let win = WindowSpec::square(b).unwrap();
            let (xb, _) = window_partition(&x, win);
            let (gb, _) = window_partition(g, win);
            let plan = Fft2Plan::<T>::new(b, b);
            let n = T::from_usize(b * b).unwrap();
            let mut acc = vec![T::zero(); groups * b * b];
            let mut xs = vec![Complex::new(T::zero(), T::zero()); b * b];
            let mut gs = xs.clone();
            for (i, (xp, gp)) in xb.data().chunks(b * b).zip(gb.data().chunks(b * b)).enumerate() {
                let grp = (i % c) / per_group;
                for ((xc, gc), (&xv, &gv)) in xs.iter_mut().zip(gs.iter_mut()).zip(xp.iter().zip(gp)) {
                    *xc = Complex::new(xv, T::zero());
                    *gc = Complex::new(gv, T::zero());
                }
                plan.forward(&mut xs);
                plan.forward(&mut gs);
                for (k, (xk, gk)) in xs.iter().zip(&gs).enumerate() {
                    acc[grp * b * b + k] += (*xk * gk.conj()).re / n;
                }
            }
            // d/dF through the symmetrised gain: average each bin with its mirror.
            let mut df = vec![T::zero(); groups * b * b];
            for grp in 0..groups {
                let sym = symmetric_gain(&acc[grp * b * b..(grp + 1) * b * b], b);
                df[grp * b * b..(grp + 1) * b * b].copy_from_slice(&sym);
            }
            vec![Some(dx), Some(Tensor::from_parts(f.shape().to_vec(), df))]
        })
    }
}
