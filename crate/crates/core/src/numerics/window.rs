use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Window geometry in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub height: usize,
    pub width: usize,
}

impl WindowSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract(format!("window {height}x{width} must be at least 1x1")));
        }
        Ok(WindowSpec { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Bookkeeping needed to undo [`window_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadInfo {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub window: WindowSpec,
}

impl PadInfo {
    pub fn for_plane(channels: usize, height: usize, width: usize, window: WindowSpec) -> Self {
        PadInfo {
            channels,
            height,
            width,
            padded_height: height.div_ceil(window.height) * window.height,
            padded_width: width.div_ceil(window.width) * window.width,
            window,
        }
    }

    pub fn windows_down(&self) -> usize {
        self.padded_height / self.window.height
    }

    pub fn windows_across(&self) -> usize {
        self.padded_width / self.window.width
    }

    pub fn num_windows(&self) -> usize {
        self.windows_down() * self.windows_across()
    }
}

/// Splits `[C, H, W]` into row-major windows `[n, C, wh, ww]`, zero-padding bottom/right.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: WindowSpec) -> (Tensor<T>, PadInfo) {
    let (c, h, w) = x.dims3();
    let info = PadInfo::for_plane(c, h, w, window);
    let (wh, ww) = (window.height, window.width);
    let mut out = vec![T::zero(); info.num_windows() * c * wh * ww];
    let src = x.data();
    for wy in 0..info.windows_down() {
        for wx in 0..info.windows_across() {
            let n = wy * info.windows_across() + wx;
            for ch in 0..c {
                for dy in 0..wh {
                    let y = wy * wh + dy;
                    if y >= h {
                        break;
                    }
                    let x0 = wx * ww;
                    let cols = ww.min(w.saturating_sub(x0));
                    let dst = ((n * c + ch) * wh + dy) * ww;
                    let s = (ch * h + y) * w + x0;
                    out[dst..dst + cols].copy_from_slice(&src[s..s + cols]);
                }
            }
        }
    }
    (Tensor::from_parts(vec![info.num_windows(), c, wh, ww], out), info)
}

/// Exact inverse of [`window_partition`], cropping the padding.
pub fn window_merge<T: Scalar>(windows: &Tensor<T>, info: &PadInfo) -> Result<Tensor<T>> {
    let (c, wh, ww) = (info.channels, info.window.height, info.window.width);
    let expected = [info.num_windows(), c, wh, ww];
    if windows.shape() != expected {
        return Err(contract(format!("windows of shape {:?} do not match pad info {:?}", windows.shape(), expected)));
    }
    let (h, w) = (info.height, info.width);
    let mut out = vec![T::zero(); c * h * w];
    let src = windows.data();
    for wy in 0..info.windows_down() {
        for wx in 0..info.windows_across() {
            let n = wy * info.windows_across() + wx;
            for ch in 0..c {
                for dy in 0..wh {
                    let y = wy * wh + dy;
                    if y >= h {
                        break;
                    }
                    let x0 = wx * ww;
                    let cols = ww.min(w.saturating_sub(x0));
                    let s = ((n * c + ch) * wh + dy) * ww;
                    let d = (ch * h + y) * w + x0;
                    out[d..d + cols].copy_from_slice(&src[s..s + cols]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}
