//! Differentiable operations. Each one computes its forward value eagerly and
//! registers a vector-Jacobian product on the tape.

use crate::conv::{conv2d_backward, conv2d_forward, gemm, Layout, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Per-pixel argmax channel of a KxHxW tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<usize>,
}

impl IndexMap {
    pub fn get(&self, y: usize, x: usize) -> usize {
        self.indices[y * self.width + x]
    }
}

/// Result of [`Tape::channel_max`]. Only `values` is differentiable; the
/// indices are piecewise constant and carry no gradient.
#[derive(Clone, Debug)]
pub struct ChannelMax {
    pub values: Var,
    pub indices: IndexMap,
}

/// Per-pixel maximum over the channel axis; ties go to the lowest channel.
pub fn channel_argmax(input: &Tensor) -> Result<(Tensor, IndexMap)> {
    let (k, h, w) = input.dims3()?;
    if k == 0 {
        return Err(Error::shape("channel_max over zero channels"));
    }
    let plane = h * w;
    let data = input.data();
    let mut values = data[..plane].to_vec();
    let mut indices = vec![0usize; plane];
    for c in 1..k {
        let row = &data[c * plane..(c + 1) * plane];
        for ((best, idx), &v) in values.iter_mut().zip(indices.iter_mut()).zip(row) {
            if v > *best {
                *best = v;
                *idx = c;
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![1, h, w], values),
        IndexMap {
            height: h,
            width: w,
            indices,
        },
    ))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    a.expect_same_shape(b)
}

fn upsample2_values(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let orow = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (x, o) in orow.iter_mut().enumerate() {
                *o = srow[x / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Sum over each 2x2 block; `scale` is applied to every sum.
fn block_sum2(x: &Tensor, scale: f64) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let base = (ch * h + 2 * y) * w + 2 * xo;
                out[(ch * oh + y) * ow + xo] =
                    scale * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

fn transpose2(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let src = x.data();
    Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r])
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        Layout::rows(k),
        b.data(),
        Layout::rows(n),
        &mut out,
        false,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

impl Tape {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(f);
        Ok(self.record(&[x], out, move |ctx| {
            let g = Tensor::from_parts(
                ctx.grad_output.shape().to_vec(),
                ctx.grad_output
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .zip(ctx.output.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            );
            vec![Some(g)]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(&[a, b], out, |ctx| {
            vec![Some(ctx.grad_output.clone()), Some(ctx.grad_output.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(&[a, b], out, |ctx| {
            vec![
                Some(ctx.grad_output.clone()),
                Some(ctx.grad_output.scaled(-1.0)),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(&[a, b], out, |ctx| {
            let g = ctx.grad_output;
            let ga = ctx.needs_grad[0].then(|| g.zip_map(ctx.inputs[1], |g, y| g * y).unwrap());
            let gb = ctx.needs_grad[1].then(|| g.zip_map(ctx.inputs[0], |g, x| g * x).unwrap());
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).scaled(s);
        Ok(self.record(&[x], out, move |ctx| vec![Some(ctx.grad_output.scaled(s))]))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v + s);
        Ok(self.record(&[x], out, |ctx| vec![Some(ctx.grad_output.clone())]))
    }

    /// Subgradient 0 at the origin.
    /// Records `side` of every element of `x` when branch tracking is on.
    fn note_sides(&mut self, x: Var, side: impl Fn(f64) -> usize) {
        if self.tracks_branches() {
            if let Ok(v) = self.try_value(x) {
                let sides: Vec<usize> = v.data().iter().map(|&a| side(a)).collect();
                self.note_branches(sides.into_iter());
            }
        }
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.note_sides(x, |a| (a > 0.0) as usize + 2 * (a < 0.0) as usize);
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// Natural logarithm; inputs must be positive for a finite result.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.note_sides(x, |a| (a > 0.0) as usize);
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    /// `log σ(x)`, finite for any finite `x`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, log_sigmoid, |x, _| sigmoid(-x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.note_sides(x, move |a| (a > lo) as usize + (a >= hi) as usize);
        self.unary(
            x,
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.record(&[x], Tensor::scalar(total), |ctx| {
            let g = ctx.grad_output.data()[0];
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let m = self.value(x).sum() / n;
        self.record(&[x], Tensor::scalar(m), move |ctx| {
            let g = ctx.grad_output.data()[0] / n;
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = matmul_values(self.value(a), self.value(b))?;
        Ok(self.record(&[a, b], out, |ctx| {
            let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = ctx.needs_grad[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    Layout::rows(n),
                    b.data(),
                    Layout::transposed(n),
                    &mut out,
                    false,
                );
                Tensor::from_parts(vec![m, k], out)
            });
            let gb = ctx.needs_grad[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    a.data(),
                    Layout::transposed(k),
                    g.data(),
                    Layout::rows(n),
                    &mut out,
                    false,
                );
                Tensor::from_parts(vec![k, n], out)
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.value(x).rank() != 2 {
            return Err(Error::shape(format!(
                "transpose needs a matrix, got {:?}",
                self.value(x).shape()
            )));
        }
        let out = transpose2(self.value(x));
        Ok(self.record(&[x], out, |ctx| vec![Some(transpose2(ctx.grad_output))]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(&[x], out, |ctx| {
            vec![Some(
                ctx.grad_output.reshape(ctx.inputs[0].shape()).unwrap(),
            )]
        }))
    }

    /// Nearest-neighbour 2x upsampling of a CxHxW tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = upsample2_values(self.value(x))?;
        Ok(self.record(&[x], out, |ctx| {
            vec![Some(block_sum2(ctx.grad_output, 1.0))]
        }))
    }

    /// 2x2 average pooling of a CxHxW tensor with even H and W.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (_, h, w) = self.value(x).dims3()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "avg_pool2 needs even extents, got {h}x{w}"
            )));
        }
        let out = block_sum2(self.value(x), 0.25);
        Ok(self.record(&[x], out, |ctx| {
            let up = upsample2_values(ctx.grad_output).unwrap();
            vec![Some(up.scaled(0.25))]
        }))
    }

    /// Concatenation of CxHxW tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values)?;
        let splits: Vec<usize> = values.iter().map(|t| t.len()).collect();
        Ok(self.record(parts, out, move |ctx| {
            let mut offset = 0;
            splits
                .iter()
                .zip(ctx.inputs)
                .zip(ctx.needs_grad)
                .map(|((&n, input), &need)| {
                    let slice = &ctx.grad_output.data()[offset..offset + n];
                    offset += n;
                    need.then(|| Tensor::from_parts(input.shape().to_vec(), slice.to_vec()))
                })
                .collect()
        }))
    }

    /// Same-size cross-correlation of a CxHxW input with KxCxhxw kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, padding: Padding) -> Result<Var> {
        self.check(input)?;
        self.check(kernels)?;
        let out = conv2d_forward(self.value(input), self.value(kernels), padding)?;
        Ok(self.record(&[input, kernels], out, move |ctx| {
            let (gx, gk) = conv2d_backward(
                ctx.inputs[0],
                ctx.inputs[1],
                ctx.grad_output,
                padding,
                ctx.needs_grad[0],
                ctx.needs_grad[1],
            )
            .expect("shapes validated in forward");
            vec![gx, gk]
        }))
    }

    /// Adds a per-channel bias (shape `[C]`) to a CxHxW tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (c, h, w) = self.value(x).dims3()?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {c} channels",
                b.shape()
            )));
        }
        let plane = h * w;
        let bias_values = b.data().to_vec();
        let out = Tensor::from_fn(&[c, h, w], |i| {
            self.value(x).data()[i] + bias_values[i / plane]
        });
        Ok(self.record(&[x, bias], out, move |ctx| {
            let g = ctx.grad_output;
            let gb = ctx.needs_grad[1].then(|| {
                Tensor::from_fn(&[c], |ch| {
                    g.data()[ch * plane..(ch + 1) * plane].iter().sum()
                })
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// Per-pixel maximum over channels. The gradient flows only into the
    /// winning channel of each pixel.
    pub fn channel_max(&mut self, x: Var) -> Result<ChannelMax> {
        self.check(x)?;
        let (values, indices) = channel_argmax(self.value(x))?;
        self.note_branches(indices.indices.iter().copied());
        let routing = indices.indices.clone();
        let var = self.record(&[x], values, move |ctx| {
            let shape = ctx.inputs[0].shape();
            let plane = shape[1] * shape[2];
            let mut g = Tensor::zeros(shape);
            let data = g.data_mut();
            for (p, (&k, &gv)) in routing.iter().zip(ctx.grad_output.data()).enumerate() {
                data[k * plane + p] = gv;
            }
            vec![Some(g)]
        });
        Ok(ChannelMax {
            values: var,
            indices,
        })
    }

    /// `Σ_i weights[i] * terms[i]` as one node.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Result<Var> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::invalid("weighted_sum needs one weight per term"));
        }
        for &t in terms {
            self.check(t)?;
        }
        let mut out = self.value(terms[0]).scaled(weights[0]);
        for (&t, &w) in terms.iter().zip(weights).skip(1) {
            let v = self.value(t);
            same_shape(&out, v)?;
            for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
                *o += w * x;
            }
        }
        let weights = weights.to_vec();
        Ok(self.record(terms, out, move |ctx| {
            weights
                .iter()
                .zip(ctx.needs_grad)
                .map(|(&w, &need)| need.then(|| ctx.grad_output.scaled(w)))
                .collect()
        }))
    }
}

pub fn log_sigmoid(v: f64) -> f64 {
    v.min(0.0) - (-v.abs()).exp().ln_1p()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn channel_max_ties_go_low() {
        let x = t(&[3, 1, 1], &[3.0, 7.0, 7.0]);
        let (v, idx) = channel_argmax(&x).unwrap();
        assert_eq!(v.data(), &[7.0]);
        assert_eq!(idx.indices, vec![1]);
    }

    #[test]
    fn channel_max_single_channel_is_identity() {
        let x = t(&[1, 2, 2], &[1.0, -2.0, 3.0, 0.5]);
        let (v, idx) = channel_argmax(&x).unwrap();
        assert_eq!(v.data(), x.data());
        assert!(idx.indices.iter().all(|&i| i == 0));
    }

    #[test]
    fn channel_max_routes_gradient_to_winner() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 1, 2], &[1.0, 5.0, 2.0, 4.0]));
        let m = tape.channel_max(x).unwrap();
        let s = tape.sum(m.values);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 4, 6], |i| i as f64));
        let p = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 2, 3]);
        assert_eq!(tape.value(p).data()[0], (0.0 + 1.0 + 6.0 + 7.0) / 4.0);
        let u = tape.upsample2(p).unwrap();
        assert_eq!(tape.value(u).shape(), &[2, 4, 6]);
        let odd = tape.param(Tensor::zeros(&[1, 3, 4]));
        assert!(tape.avg_pool2(odd).is_err());
    }

    #[test]
    fn matmul_values_small() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3, 1], &[1.0, 0.0, -1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[-2.0, -2.0]);
        assert!(tape.matmul(b, b).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
