//! Layer graph, forward pass and reverse-mode gradients of the streamline
//! autoencoder.
//!
//! Activations are stored channel-major across the batch: element
//! `(channel, sample, position)` lives at `(c * batch + b) * len + t`. This lets
//! every convolution run as one GEMM over the whole batch.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shape parameters of the convolutional autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Width of the first encoder stage; each later stage doubles it.
    pub base_channels: usize,
    /// Number of stride-2 encoder stages (and upsampling decoder stages).
    pub stages: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub input_vertices: usize,
    /// Number of cubic B-spline functions the decoder output is projected
    /// onto along each coordinate; 0 leaves the output unconstrained.
    #[serde(default)]
    pub output_basis: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            base_channels: 8,
            stages: 4,
            kernel: 3,
            latent_dim: crate::autoencoder::LATENT_DIM,
            input_vertices: crate::geometry::STREAMLINE_VERTICES,
            output_basis: 8,
        }
    }
}

/// Name and shape of one parameter tensor, in storage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Weight shape `[out_ch, in_ch, kernel]`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_len: usize,
        out_len: usize,
        w: Range<usize>,
        b: Range<usize>,
    },
    /// Weight shape `[out_features, in_features]`.
    Dense {
        in_f: usize,
        out_f: usize,
        w: Range<usize>,
        b: Range<usize>,
    },
    Relu,
    /// Nearest-neighbor upsampling by 2 along positions.
    Upsample {
        ch: usize,
        in_len: usize,
    },
    /// `[ch][batch][len]` to a `[ch * len][batch]` feature matrix.
    Flatten {
        ch: usize,
        len: usize,
    },
    /// Inverse of `Flatten`.
    Unflatten {
        ch: usize,
        len: usize,
    },
    /// Fixed linear map along positions, `len x len` row-major.
    Project {
        len: usize,
        matrix: Arc<Vec<f64>>,
    },
}

/// A sequential stack of layers over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Stack {
    ops: Vec<Op>,
    in_numel: usize,
    out_numel: usize,
}

/// The encoder and decoder stacks sharing one parameter vector.
#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) encoder: Stack,
    pub(crate) decoder: Stack,
    specs: Vec<ParamSpec>,
    n_params: usize,
    /// Fan-in per parameter tensor, used for initialization.
    fan_in: Vec<(Range<usize>, usize, bool)>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    offset: usize,
    fan_in: Vec<(Range<usize>, usize, bool)>,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, fan_in: usize, bias: bool) -> Range<usize> {
        let n: usize = shape.iter().product();
        let r = self.offset..self.offset + n;
        self.offset += n;
        self.specs.push(ParamSpec { name, shape });
        self.fan_in.push((r.clone(), fan_in, bias));
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, in_len: usize) -> Op {
        let pad = kernel / 2;
        let out_len = (in_len + 2 * pad - kernel) / stride + 1;
        let fan = in_ch * kernel;
        let w = self.alloc(format!("{name}.weight"), vec![out_ch, in_ch, kernel], fan, false);
        let b = self.alloc(format!("{name}.bias"), vec![out_ch], fan, true);
        Op::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_len,
            out_len,
            w,
            b,
        }
    }

    fn dense(&mut self, name: &str, in_f: usize, out_f: usize) -> Op {
        let w = self.alloc(format!("{name}.weight"), vec![out_f, in_f], in_f, false);
        let b = self.alloc(format!("{name}.bias"), vec![out_f], in_f, true);
        Op::Dense { in_f, out_f, w, b }
    }
}

impl Network {
    /// Builds the autoencoder: strided convolutions down to a dense latent,
    /// then upsampling convolutions back to a 3-channel vertex signal.
    pub fn autoencoder(arch: &Architecture) -> Network {
        assert!(arch.stages >= 1 && arch.kernel % 2 == 1);
        assert_eq!(
            arch.input_vertices % (1 << arch.stages),
            0,
            "input length must be divisible by 2^stages"
        );
        let mut b = Builder {
            specs: Vec::new(),
            offset: 0,
            fan_in: Vec::new(),
        };
        let widths: Vec<usize> = (0..arch.stages).map(|s| arch.base_channels << s).collect();
        let bottleneck_len = arch.input_vertices >> arch.stages;
        let top = widths[arch.stages - 1];

        let mut enc = Vec::new();
        let (mut ch, mut len) = (3, arch.input_vertices);
        for (s, &w) in widths.iter().enumerate() {
            let op = b.conv(&format!("encoder.conv{}", s + 1), ch, w, arch.kernel, 2, len);
            len /= 2;
            ch = w;
            enc.push(op);
            enc.push(Op::Relu);
        }
        enc.push(Op::Flatten { ch, len });
        enc.push(b.dense("encoder.latent", ch * len, arch.latent_dim));

        let mut dec = vec![
            b.dense("decoder.expand", arch.latent_dim, top * bottleneck_len),
            Op::Relu,
            Op::Unflatten {
                ch: top,
                len: bottleneck_len,
            },
        ];
        let (mut ch, mut len) = (top, bottleneck_len);
        for s in (0..arch.stages).rev() {
            let out = if s == 0 { widths[0] } else { widths[s - 1] };
            dec.push(Op::Upsample { ch, in_len: len });
            len *= 2;
            let name = format!("decoder.conv{}", arch.stages - s);
            dec.push(b.conv(&name, ch, out, arch.kernel, 1, len));
            dec.push(Op::Relu);
            ch = out;
        }
        dec.push(b.conv("decoder.output", ch, 3, arch.kernel, 1, len));
        if arch.output_basis > 0 {
            dec.push(Op::Project {
                len,
                matrix: Arc::new(spline_projection(len, arch.output_basis)),
            });
        }

        Network {
            encoder: Stack {
                ops: enc,
                in_numel: 3 * arch.input_vertices,
                out_numel: arch.latent_dim,
            },
            decoder: Stack {
                ops: dec,
                in_numel: arch.latent_dim,
                out_numel: 3 * arch.input_vertices,
            },
            specs: b.specs,
            n_params: b.offset,
            fan_in: b.fan_in,
        }
    }

    /// Two-layer network (one strided convolution, one dense layer) mapping a
    /// `channels x len` signal to `out` features. Used for gradient checks.
    pub fn miniature(channels: usize, len: usize, hidden: usize, out: usize) -> Network {
        let mut b = Builder {
            specs: Vec::new(),
            offset: 0,
            fan_in: Vec::new(),
        };
        let conv = b.conv("mini.conv", channels, hidden, 3, 2, len);
        let out_len = match conv {
            Op::Conv { out_len, .. } => out_len,
            _ => unreachable!(),
        };
        let dense = b.dense("mini.dense", hidden * out_len, out);
        Network {
            encoder: Stack {
                ops: vec![
                    conv,
                    Op::Relu,
                    Op::Flatten {
                        ch: hidden,
                        len: out_len,
                    },
                    dense,
                ],
                in_numel: channels * len,
                out_numel: out,
            },
            decoder: Stack {
                ops: Vec::new(),
                in_numel: out,
                out_numel: out,
            },
            specs: b.specs,
            n_params: b.offset,
            fan_in: b.fan_in,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn input_numel(&self) -> usize {
        self.encoder.in_numel
    }

    pub fn output_numel(&self) -> usize {
        self.decoder.out_numel
    }

    /// He-uniform weights for layers followed by a rectifier, zero biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for (range, fan_in, bias) in &self.fan_in {
            if *bias {
                continue;
            }
            let bound = (6.0 / *fan_in as f64).sqrt();
            for v in &mut p[range.clone()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// Runs encoder then decoder. `input` is in the batched channel-major layout.
    pub fn forward(&self, params: &[f64], input: &[f64], batch: usize) -> Vec<f64> {
        let z = self.encoder.forward(params, input, batch, None);
        self.decoder.forward(params, &z, batch, None)
    }

    /// Mean squared error between the network output and `target`.
    pub fn loss(&self, params: &[f64], input: &[f64], target: &[f64], batch: usize) -> f64 {
        let out = self.forward(params, input, batch);
        mse(&out, target)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, params: &[f64], input: &[f64], target: &[f64], batch: usize, grad: &mut [f64]) -> f64 {
        assert_eq!(grad.len(), self.n_params);
        let mut enc_cache = Vec::new();
        let mut dec_cache = Vec::new();
        let z = self.encoder.forward(params, input, batch, Some(&mut enc_cache));
        let out = self.decoder.forward(params, &z, batch, Some(&mut dec_cache));
        let loss = mse(&out, target);
        let scale = 2.0 / out.len() as f64;
        let d_out: Vec<f64> = out.iter().zip(target).map(|(o, t)| scale * (o - t)).collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let d_z = self.decoder.backward(params, &dec_cache, d_out, batch, grad);
        self.encoder.backward(params, &enc_cache, d_z, batch, grad);
        loss
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

impl Stack {
    pub(crate) fn forward(
        &self,
        params: &[f64],
        input: &[f64],
        batch: usize,
        mut cache: Option<&mut Vec<Vec<f64>>>,
    ) -> Vec<f64> {
        assert_eq!(input.len(), self.in_numel * batch, "input size mismatch");
        let mut x = input.to_vec();
        for op in &self.ops {
            let y = op.forward(params, &x, batch);
            if let Some(c) = cache.as_deref_mut() {
                c.push(x);
            }
            x = y;
        }
        x
    }

    fn backward(
        &self,
        params: &[f64],
        cache: &[Vec<f64>],
        mut grad_out: Vec<f64>,
        batch: usize,
        grad: &mut [f64],
    ) -> Vec<f64> {
        for (op, input) in self.ops.iter().zip(cache).rev() {
            grad_out = op.backward(params, input, &grad_out, batch, grad);
        }
        grad_out
    }
}

impl Op {
    fn forward(&self, params: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        match self {
            Op::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                in_len,
                out_len,
                w,
                b,
            } => {
                let rows = in_ch * kernel;
                let cols_n = batch * out_len;
                let cols = im2col(x, *in_ch, batch, *in_len, *out_len, *kernel, *stride, *pad);
                let mut y = vec![0.0; out_ch * cols_n];
                let bias = &params[b.clone()];
                for (o, row) in y.chunks_exact_mut(cols_n).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[o]);
                }
                gemm(
                    *out_ch,
                    rows,
                    cols_n,
                    &params[w.clone()],
                    rows,
                    1,
                    &cols,
                    cols_n,
                    1,
                    1.0,
                    &mut y,
                    cols_n,
                    1,
                );
                y
            }
            Op::Dense { in_f, out_f, w, b } => {
                let mut y = vec![0.0; out_f * batch];
                let bias = &params[b.clone()];
                for (o, row) in y.chunks_exact_mut(batch).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[o]);
                }
                gemm(
                    *out_f,
                    *in_f,
                    batch,
                    &params[w.clone()],
                    *in_f,
                    1,
                    x,
                    batch,
                    1,
                    1.0,
                    &mut y,
                    batch,
                    1,
                );
                y
            }
            Op::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Op::Upsample { ch, in_len } => {
                let mut y = Vec::with_capacity(ch * batch * in_len * 2);
                for &v in x {
                    y.push(v);
                    y.push(v);
                }
                y
            }
            Op::Flatten { ch, len } => {
                let mut y = vec![0.0; ch * len * batch];
                for c in 0..*ch {
                    for s in 0..batch {
                        for t in 0..*len {
                            y[(c * len + t) * batch + s] = x[(c * batch + s) * len + t];
                        }
                    }
                }
                y
            }
            Op::Unflatten { ch, len } => {
                let mut y = vec![0.0; ch * len * batch];
                for c in 0..*ch {
                    for s in 0..batch {
                        for t in 0..*len {
                            y[(c * batch + s) * len + t] = x[(c * len + t) * batch + s];
                        }
                    }
                }
                y
            }
            Op::Project { len, matrix } => {
                let rows = x.len() / len;
                let mut y = vec![0.0; x.len()];
                // Y = X S^T over rows of length `len`
                gemm(rows, *len, *len, x, *len, 1, matrix, 1, *len, 0.0, &mut y, *len, 1);
                y
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], batch: usize, grad: &mut [f64]) -> Vec<f64> {
        match self {
            Op::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                in_len,
                out_len,
                w,
                b,
            } => {
                let rows = in_ch * kernel;
                let cols_n = batch * out_len;
                let cols = im2col(x, *in_ch, batch, *in_len, *out_len, *kernel, *stride, *pad);
                for (o, row) in dy.chunks_exact(cols_n).enumerate() {
                    grad[b.start + o] += row.iter().sum::<f64>();
                }
                // dW += dY * cols^T
                gemm(
                    *out_ch,
                    cols_n,
                    rows,
                    dy,
                    cols_n,
                    1,
                    &cols,
                    1,
                    cols_n,
                    1.0,
                    &mut grad[w.clone()],
                    rows,
                    1,
                );
                // dcols = W^T * dY
                let mut dcols = vec![0.0; rows * cols_n];
                gemm(
                    rows,
                    *out_ch,
                    cols_n,
                    &params[w.clone()],
                    1,
                    rows,
                    dy,
                    cols_n,
                    1,
                    0.0,
                    &mut dcols,
                    cols_n,
                    1,
                );
                col2im(&dcols, *in_ch, batch, *in_len, *out_len, *kernel, *stride, *pad)
            }
            Op::Dense { in_f, out_f, w, b } => {
                for (o, row) in dy.chunks_exact(batch).enumerate() {
                    grad[b.start + o] += row.iter().sum::<f64>();
                }
                gemm(
                    *out_f,
                    batch,
                    *in_f,
                    dy,
                    batch,
                    1,
                    x,
                    1,
                    batch,
                    1.0,
                    &mut grad[w.clone()],
                    *in_f,
                    1,
                );
                let mut dx = vec![0.0; in_f * batch];
                gemm(
                    *in_f,
                    *out_f,
                    batch,
                    &params[w.clone()],
                    1,
                    *in_f,
                    dy,
                    batch,
                    1,
                    0.0,
                    &mut dx,
                    batch,
                    1,
                );
                dx
            }
            Op::Relu => x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
            Op::Upsample { .. } => dy.chunks_exact(2).map(|p| p[0] + p[1]).collect(),
            // Flatten and Unflatten are mutual inverses, and so are their adjoints.
            Op::Flatten { ch, len } => Op::Unflatten { ch: *ch, len: *len }.forward(params, dy, batch),
            Op::Unflatten { ch, len } => Op::Flatten { ch: *ch, len: *len }.forward(params, dy, batch),
            Op::Project { len, matrix } => {
                let rows = dy.len() / len;
                let mut dx = vec![0.0; dy.len()];
                gemm(rows, *len, *len, dy, *len, 1, matrix, *len, 1, 0.0, &mut dx, *len, 1);
                dx
            }
        }
    }
}

/// Gaussian smoothing along a sequence of `len` samples. Beyond the ends the
/// sequence is continued by point reflection through the end sample, so end
/// samples and linear sequences pass through unchanged.
/// Orthogonal projection onto the span of `k` clamped cubic B-splines
/// sampled at `len` evenly spaced positions. Symmetric, so the same matrix
/// serves the backward pass.
pub(crate) fn spline_projection(len: usize, k: usize) -> Vec<f64> {
    let k = k.clamp(1, len);
    let degree = 3.min(k - 1);
    let interior = k - degree - 1;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));

    // columns of the basis, orthonormalised in place (Gram-Schmidt, twice)
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..len)
                .map(|i| {
                    bspline(
                        &knots,
                        degree,
                        j,
                        if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 },
                    )
                })
                .collect()
        })
        .collect();
    for j in 0..k {
        for _ in 0..2 {
            for m in 0..j {
                let dot: f64 = q[j].iter().zip(&q[m]).map(|(a, b)| a * b).sum();
                let qm = q[m].clone();
                q[j].iter_mut().zip(&qm).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = q[j].iter().map(|a| a * a).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|a| *a /= norm);
    }
    let mut m = vec![0.0; len * len];
    for col in &q {
        for (r, &a) in col.iter().enumerate() {
            for (c, &b) in col.iter().enumerate() {
                m[r * len + c] += a * b;
            }
        }
    }
    m
}

/// Cox-de Boor evaluation of basis function `j`; the last one is closed at 1.
fn bspline(knots: &[f64], degree: usize, j: usize, t: f64) -> f64 {
    if degree == 0 {
        let last = knots[j + 1] == 1.0 && knots[j] < 1.0;
        return if knots[j] <= t && (t < knots[j + 1] || (last && t == 1.0)) {
            1.0
        } else {
            0.0
        };
    }
    let mut v = 0.0;
    let left = knots[j + degree] - knots[j];
    if left > 0.0 {
        v += (t - knots[j]) / left * bspline(knots, degree - 1, j, t);
    }
    let right = knots[j + degree + 1] - knots[j + 1];
    if right > 0.0 {
        v += (knots[j + degree + 1] - t) / right * bspline(knots, degree - 1, j + 1, t);
    }
    v
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    in_ch: usize,
    batch: usize,
    in_len: usize,
    out_len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let cols_n = batch * out_len;
    let mut cols = vec![0.0; in_ch * kernel * cols_n];
    for i in 0..in_ch {
        for k in 0..kernel {
            let row = &mut cols[(i * kernel + k) * cols_n..][..cols_n];
            for s in 0..batch {
                let src = &x[(i * batch + s) * in_len..][..in_len];
                let dst = &mut row[s * out_len..][..out_len];
                for (t, d) in dst.iter_mut().enumerate() {
                    let pos = (t * stride + k) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < in_len {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    in_ch: usize,
    batch: usize,
    in_len: usize,
    out_len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let cols_n = batch * out_len;
    let mut dx = vec![0.0; in_ch * batch * in_len];
    for i in 0..in_ch {
        for k in 0..kernel {
            let row = &dcols[(i * kernel + k) * cols_n..][..cols_n];
            for s in 0..batch {
                let dst = &mut dx[(i * batch + s) * in_len..][..in_len];
                let src = &row[s * out_len..][..out_len];
                for (t, &g) in src.iter().enumerate() {
                    let pos = (t * stride + k) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < in_len {
                        dst[pos as usize] += g;
                    }
                }
            }
        }
    }
    dx
}

/// `C = alpha * A * B + beta_keep * C` with explicit row/column strides,
/// where `beta` is 1.0 to accumulate or 0.0 to overwrite.
#[allow(clippy::too_many_arguments)]
#[rustfmt::skip]
fn gemm(
    m: usize, k: usize, n: usize,
    a: &[f64], rsa: usize, csa: usize,
    b: &[f64], rsb: usize, csb: usize,
    beta: f64, c: &mut [f64], rsc: usize, csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n,
            1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), rsc as isize, csc as isize,
        );
    }
}
