//! Same-size 2-D cross-correlation, its adjoints, and the dense matrix
//! products they are lowered to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How samples outside the image are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    #[default]
    Reflect,
    Zero,
}

/// Row-major strides of a matrix operand: `(row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct Layout(pub isize, pub isize);

impl Layout {
    pub fn rows(cols: usize) -> Self {
        Layout(cols as isize, 1)
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Layout(1, cols as isize)
    }
}

/// `c = a * b (+ c if accumulate)` for an `m x k` times `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the operand slices cover every index addressed by the given
    // dimensions and strides (checked above for both stride layouts used
    // in this crate), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.0,
            la.1,
            b.as_ptr(),
            lb.0,
            lb.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source index for each padded output coordinate along one axis.
fn axis_map(n: usize, extent: usize, padding: Padding) -> Vec<Option<usize>> {
    let pad = (extent / 2) as isize;
    let n_i = n as isize;
    (0..(n as isize + 2 * pad))
        .map(|p| {
            let i = p - pad;
            if (0..n_i).contains(&i) {
                Some(i as usize)
            } else {
                match padding {
                    Padding::Zero => None,
                    Padding::Reflect => {
                        let r = if i < 0 { -i } else { 2 * (n_i - 1) - i };
                        Some(r as usize)
                    }
                }
            }
        })
        .collect()
}

pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernels: &Tensor, padding: Padding) -> Result<Self> {
        let (c, h, w) = input.dims3()?;
        let &[k, kc, kh, kw] = kernels.shape() else {
            return Err(Error::shape(format!(
                "kernels must be KxCxhxw, got {:?}",
                kernels.shape()
            )));
        };
        if kc != c {
            return Err(Error::shape(format!(
                "kernels expect {kc} channels, input has {c}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("kernel extent {kh}x{kw} must be odd")));
        }
        if padding == Padding::Reflect && (kh / 2 >= h.max(1) || kw / 2 >= w.max(1)) {
            return Err(Error::shape(format!(
                "reflect padding of a {kh}x{kw} kernel needs an image larger than {h}x{w}"
            )));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            kernels: k,
            kh,
            kw,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds the input into a `(C*kh*kw) x (H*W)` patch matrix.
fn im2col(input: &[f64], g: &ConvGeometry, padding: Padding) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let ymap = axis_map(h, g.kh, padding);
    let xmap = axis_map(w, g.kw, padding);
    let mut cols = vec![0.0; g.rows() * g.pixels()];
    for c in 0..g.channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let Some(sy) = ymap[y + dy] else { continue };
                    let src = &plane[sy * w..(sy + 1) * w];
                    let out = &mut dst[y * w..(y + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        if let Some(sx) = xmap[x + dx] {
                            *o = src[sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(cols: &[f64], g: &ConvGeometry, padding: Padding) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let ymap = axis_map(h, g.kh, padding);
    let xmap = axis_map(w, g.kw, padding);
    let mut out = vec![0.0; g.channels * h * w];
    for c in 0..g.channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let Some(sy) = ymap[y + dy] else { continue };
                    let s = &src[y * w..(y + 1) * w];
                    for (x, &v) in s.iter().enumerate() {
                        if let Some(sx) = xmap[x + dx] {
                            plane[sy * w + sx] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernels, padding)?;
    let mut out = vec![0.0; g.kernels * g.pixels()];
    if g.kh == 1 && g.kw == 1 {
        gemm(
            g.kernels,
            g.channels,
            g.pixels(),
            kernels.data(),
            Layout::rows(g.channels),
            input.data(),
            Layout::rows(g.pixels()),
            &mut out,
            false,
        );
    } else {
        let cols = im2col(input.data(), &g, padding);
        gemm(
            g.kernels,
            g.rows(),
            g.pixels(),
            kernels.data(),
            Layout::rows(g.rows()),
            &cols,
            Layout::rows(g.pixels()),
            &mut out,
            false,
        );
    }
    Ok(Tensor::from_parts(vec![g.kernels, g.height, g.width], out))
}

/// Gradients with respect to the input and the kernels, each computed only
/// when requested.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_output: &Tensor,
    padding: Padding,
    need_input: bool,
    need_kernels: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(input, kernels, padding)?;
    if grad_output.shape() != [g.kernels, g.height, g.width] {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match convolution output",
            grad_output.shape()
        )));
    }
    let pointwise = g.kh == 1 && g.kw == 1;
    let cols = (need_kernels && !pointwise).then(|| im2col(input.data(), &g, padding));
    let patches: &[f64] = cols.as_deref().unwrap_or(input.data());

    let grad_kernels = need_kernels.then(|| {
        let mut gk = vec![0.0; kernels.len()];
        gemm(
            g.kernels,
            g.pixels(),
            g.rows(),
            grad_output.data(),
            Layout::rows(g.pixels()),
            patches,
            Layout::transposed(g.pixels()),
            &mut gk,
            false,
        );
        Tensor::from_parts(kernels.shape().to_vec(), gk)
    });

    let grad_input = need_input.then(|| {
        let mut gcols = vec![0.0; g.rows() * g.pixels()];
        gemm(
            g.rows(),
            g.kernels,
            g.pixels(),
            kernels.data(),
            Layout::transposed(g.rows()),
            grad_output.data(),
            Layout::rows(g.pixels()),
            &mut gcols,
            false,
        );
        let data = if pointwise {
            gcols
        } else {
            col2im(&gcols, &g, padding)
        };
        Tensor::from_parts(input.shape().to_vec(), data)
    });
    Ok((grad_input, grad_kernels))
}
