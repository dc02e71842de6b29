use super::{SliceLayout, SIGMA_MIN};
use crate::autograd::Var;
use crate::error::{contract, Result};
use crate::nn::{Conv, Ctx, Init};
use crate::scalar::Scalar;

/// Hidden width of each per-slice parameter network.
pub const CONTEXT_WIDTH: usize = 48;

/// Predicted mean and scale of one slice.
#[derive(Clone, Copy)]
pub struct SliceParams<'t, T: Scalar> {
    pub mu: Var<'t, T>,
    pub sigma: Var<'t, T>,
}

/// Per-slice networks mapping hyper features and earlier slices to Gaussian parameters.
#[derive(Debug, Clone)]
pub struct SliceContext {
    layout: SliceLayout,
    hyper_channels: usize,
    nets: Vec<[Conv; 3]>,
}

impl SliceContext {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, layout: SliceLayout, hyper_channels: usize) -> Self {
        let mut nets = Vec::with_capacity(layout.len());
        for (i, &size) in layout.sizes().iter().enumerate() {
            let cin = hyper_channels + layout.start(i);
            let p = format!("{name}.{i}");
            nets.push([
                Conv::new(init, &format!("{p}.in"), cin, CONTEXT_WIDTH, 1, 1),
                Conv::new(init, &format!("{p}.mid"), CONTEXT_WIDTH, CONTEXT_WIDTH, 3, 1),
                Conv::with_gain(init, &format!("{p}.out"), CONTEXT_WIDTH, 2 * size, 1, 1, 0.1),
            ]);
        }
        SliceContext { layout, hyper_channels, nets }
    }

    pub fn layout(&self) -> &SliceLayout {
        &self.layout
    }

    /// Parameters of slice `i`; `decoded` must hold at least slices `0..i`, later entries are ignored.
    pub fn params<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        hyper: Var<'t, T>,
        decoded: &[Var<'t, T>],
        i: usize,
    ) -> Result<SliceParams<'t, T>> {
        if i >= self.layout.len() {
            return Err(contract(format!("slice {i} out of range")));
        }
        if decoded.len() < i {
            return Err(contract(format!("slice {i} requested with only {} slices decoded", decoded.len())));
        }
        let (hc, h, w) = hyper.dims3();
        if hc != self.hyper_channels {
            return Err(contract(format!("hyper features have {hc} channels, expected {}", self.hyper_channels)));
        }
        for (j, d) in decoded[..i].iter().enumerate() {
            if d.dims3() != (self.layout.sizes()[j], h, w) {
                return Err(contract(format!("decoded slice {j} has shape {:?}", d.shape())));
            }
        }
        let mut parts = vec![hyper];
        parts.extend_from_slice(&decoded[..i]);
        let input = if parts.len() == 1 { hyper } else { Var::concat_channels(&parts) };
        let [a, b, c] = &self.nets[i];
        let out = c.forward(ctx, b.forward(ctx, a.forward(ctx, input).gelu()).gelu());
        let size = self.layout.sizes()[i];
        let mu = out.narrow_channels(0, size);
        let sigma = out.narrow_channels(size, size).add_scalar(0.5).softplus().clamp_min(SIGMA_MIN);
        Ok(SliceParams { mu, sigma })
    }
}
