//! Single-sample (`C x H x W`) layer kernels with hand-written backward passes.
//!
//! Parameters live in one flat slice; each layer addresses its tensors through
//! offset ranges. Gradients are accumulated into a slice with the same layout.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis};

use super::Real;

/// 2-D convolution with square kernel 1 or 3 (zero padding keeps H x W).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

pub(crate) struct ConvCache<T> {
    /// im2col matrix `(in*k*k, H*W)`; for 1x1 kernels this is the input itself.
    col: Array2<T>,
    hw: (usize, usize),
}

impl Conv {
    fn cols(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn forward<T: Real>(&self, params: &[T], x: ArrayView3<'_, T>) -> (Array3<T>, ConvCache<T>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let col = match self.kernel {
            1 => x.as_standard_layout().into_owned().into_shape_with_order((c, h * w)).expect("contiguous"),
            3 => im2col3(x),
            k => unreachable!("unsupported kernel {k}"),
        };
        let wm = ArrayView2::from_shape((self.out_ch, self.cols()), &params[self.weight.clone()])
            .expect("weight layout");
        let mut y = Array2::<T>::zeros((self.out_ch, h * w));
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(&params[b.clone()]) {
                row.fill(bv);
            }
            general_mat_mul(T::one(), &wm, &col, T::one(), &mut y);
        } else {
            general_mat_mul(T::one(), &wm, &col, T::zero(), &mut y);
        }
        let y = y.into_shape_with_order((self.out_ch, h, w)).expect("contiguous");
        (y, ConvCache { col, hw: (h, w) })
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dy: ArrayView3<'_, T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Array3<T>> {
        let (h, w) = cache.hw;
        let dy = dy.as_standard_layout();
        let dy2 = dy.view().into_shape_with_order((self.out_ch, h * w)).expect("contiguous");
        {
            let mut dw = ArrayViewMut2::from_shape((self.out_ch, self.cols()), &mut grads[self.weight.clone()])
                .expect("weight layout");
            general_mat_mul(T::one(), &dy2, &cache.col.t(), T::one(), &mut dw);
        }
        if let Some(b) = &self.bias {
            for (g, row) in grads[b.clone()].iter_mut().zip(dy2.axis_iter(Axis(0))) {
                *g = *g + row.sum();
            }
        }
        if !need_dx {
            return None;
        }
        let wm = ArrayView2::from_shape((self.out_ch, self.cols()), &params[self.weight.clone()])
            .expect("weight layout");
        let mut dcol = Array2::<T>::zeros((self.cols(), h * w));
        general_mat_mul(T::one(), &wm.t(), &dy2, T::zero(), &mut dcol);
        Some(match self.kernel {
            1 => dcol.into_shape_with_order((self.in_ch, h, w)).expect("contiguous"),
            _ => col2im3(&dcol, self.in_ch, h, w),
        })
    }
}

fn im2col3<T: Real>(x: ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut col = Array2::<T>::zeros((c * 9, h * w));
    let cs = col.as_slice_mut().expect("fresh array");
    let n = h * w;
    for ci in 0..c {
        let plane = &xs[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cs[(ci * 9 + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im3<T: Real>(dcol: &Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
    let n = h * w;
    let cs = dcol.as_slice().expect("standard layout");
    let mut dx = Array3::<T>::zeros((c, h, w));
    let xs = dx.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &mut xs[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cs[(ci * 9 + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], &src[..]),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
    dx
}

/// Transposed convolution with a 2x2 kernel and stride 2 (doubles H and W).
///
/// Weight layout is `(out, 2, 2, in)`, i.e. a `(out*4, in)` matrix whose row
/// `o*4 + dy*2 + dx` produces output pixel `(2y+dy, 2x+dx)` of channel `o`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct UpConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

pub(crate) struct UpCache<T> {
    input: Array2<T>,
    hw: (usize, usize),
}

impl UpConv {
    pub fn forward<T: Real>(&self, params: &[T], x: ArrayView3<'_, T>) -> (Array3<T>, UpCache<T>) {
        let (c, h, w) = x.dim();
        let input = x.as_standard_layout().into_owned().into_shape_with_order((c, h * w)).expect("contiguous");
        let wm = ArrayView2::from_shape((self.out_ch * 4, self.in_ch), &params[self.weight.clone()])
            .expect("weight layout");
        let mut tmp = Array2::<T>::zeros((self.out_ch * 4, h * w));
        general_mat_mul(T::one(), &wm, &input, T::zero(), &mut tmp);
        let mut y = Array3::<T>::zeros((self.out_ch, 2 * h, 2 * w));
        let bias = self.bias.as_ref().map(|b| &params[b.clone()]);
        for o in 0..self.out_ch {
            let bv = bias.map_or(T::zero(), |b| b[o]);
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let src = tmp.row(o * 4 + k);
                for yy in 0..h {
                    for xx in 0..w {
                        y[[o, 2 * yy + dy, 2 * xx + dx]] = src[yy * w + xx] + bv;
                    }
                }
            }
        }
        (y, UpCache { input, hw: (h, w) })
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &UpCache<T>,
        dout: ArrayView3<'_, T>,
        grads: &mut [T],
    ) -> Array3<T> {
        let (h, w) = cache.hw;
        let mut dtmp = Array2::<T>::zeros((self.out_ch * 4, h * w));
        for o in 0..self.out_ch {
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let mut dst = dtmp.row_mut(o * 4 + k);
                for yy in 0..h {
                    for xx in 0..w {
                        dst[yy * w + xx] = dout[[o, 2 * yy + dy, 2 * xx + dx]];
                    }
                }
            }
        }
        if let Some(b) = &self.bias {
            let gb = &mut grads[b.clone()];
            for o in 0..self.out_ch {
                let mut s = T::zero();
                for k in 0..4 {
                    s = s + dtmp.row(o * 4 + k).sum();
                }
                gb[o] = gb[o] + s;
            }
        }
        {
            let mut dw = ArrayViewMut2::from_shape((self.out_ch * 4, self.in_ch), &mut grads[self.weight.clone()])
                .expect("weight layout");
            general_mat_mul(T::one(), &dtmp, &cache.input.t(), T::one(), &mut dw);
        }
        let wm = ArrayView2::from_shape((self.out_ch * 4, self.in_ch), &params[self.weight.clone()])
            .expect("weight layout");
        let mut dx = Array2::<T>::zeros((self.in_ch, h * w));
        general_mat_mul(T::one(), &wm.t(), &dtmp, T::zero(), &mut dx);
        dx.into_shape_with_order((self.in_ch, h, w)).expect("contiguous")
    }
}

/// 2x2 max pooling; remembers the winning input offset per output cell.
pub(crate) fn max_pool2<T: Real>(x: ArrayView3<'_, T>) -> (Array3<T>, Vec<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<T>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = x[[ch, 2 * r, 2 * col]];
                let mut k = 0u8;
                for kk in 1..4u8 {
                    let v = x[[ch, 2 * r + (kk / 2) as usize, 2 * col + (kk % 2) as usize]];
                    if v > best {
                        best = v;
                        k = kk;
                    }
                }
                y[[ch, r, col]] = best;
                arg.push(k);
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool2_backward<T: Real>(dy: ArrayView3<'_, T>, arg: &[u8]) -> Array3<T> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<T>::zeros((c, oh * 2, ow * 2));
    let mut i = 0;
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let k = arg[i] as usize;
                dx[[ch, 2 * r + k / 2, 2 * col + k % 2]] = dy[[ch, r, col]];
                i += 1;
            }
        }
    }
    dx
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub(crate) fn apply<T: Real>(self, x: &mut Array3<T>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu => {
                let a = T::from_f64(LEAKY_SLOPE).expect("slope");
                x.mapv_inplace(|v| if v > T::zero() { v } else { v * a })
            }
        }
    }

    /// Gradient given the activation's own output.
    pub(crate) fn backward<T: Real>(self, out: &Array3<T>, dy: &mut Array3<T>) {
        let slope = match self {
            Activation::Relu => T::zero(),
            Activation::LeakyRelu => T::from_f64(LEAKY_SLOPE).expect("slope"),
        };
        ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
            if o <= T::zero() {
                *d = *d * slope;
            }
        });
    }
}
