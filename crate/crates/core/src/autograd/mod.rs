//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its variables; calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns gradients for all parameter leaves. Graphs are single-use: build
//! one per forward pass.

pub mod kernels;

use std::hash::{DefaultHasher, Hash, Hasher};

use indexmap::IndexMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::{col2im, im2col, matmul, Window2d};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddRow {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Window2d,
        cols: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: Window2d,
        dilation: usize,
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMean {
        x: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    NegSqDist {
        x: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxRows {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ColumnNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Permute3 {
        x: Var,
        perm: [usize; 3],
    },
    Reshape {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        xs: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    ShiftRows {
        x: Var,
        shift: usize,
    },
    RepeatRows {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: IndexMap<String, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a named parameter (zeros if it did not influence the output).
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor<T>> {
        self.params
    }

    /// Gradient with respect to an arbitrary tracked node.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    grad_enabled: bool,
    branches: Option<DefaultHasher>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            grad_enabled: true,
            branches: None,
        }
    }

    /// Records which side of every non-smooth point (ReLU, max) each
    /// evaluation lands on; see [`Graph::branch_signature`].
    pub fn with_branch_tracking(mut self) -> Self {
        self.branches = Some(DefaultHasher::new());
        self
    }

    /// Digest of all ReLU masks and max selections so far. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(Hasher::finish)
    }

    fn record_branches(&mut self, branch: impl Hash) {
        if let Some(h) = self.branches.as_mut() {
            branch.hash(h);
        }
    }

    /// A graph that skips the caches needed for backpropagation.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is recorded (used by gradient tests).
    pub fn tracked_input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf. Registering the same name twice returns the first handle.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    // ----------------------------------------------------------------------
    // dense algebra

    /// `op(a) · op(b)` for matrices, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = (av.rows(), av.cols());
        let (br, bc) = (bv.rows(), bv.cols());
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = vec![T::zero(); m * n];
        matmul(av.data(), ar, ac, ta, bv.data(), br, bc, tb, &mut out, false);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = bv.len();
        assert_eq!(xv.cols(), n, "bias width");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        self.push(out, Op::AddRow { x, b }, &[x, b])
    }

    /// `x · w + b` with `w: in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.branches.is_some() {
            let mask: Vec<bool> = self.value(x).data().iter().map(|&v| v > T::zero()).collect();
            self.record_branches(mask);
        }
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh { x }, &[x])
    }

    // ----------------------------------------------------------------------
    // convolution and pooling

    /// 2D convolution over `[B, C, H, W]` with weights `[O, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = Window2d {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (batch, out_ch) = (xs[0], ws[0]);
        let (plen, area) = (geom.patch_len(), geom.out_area());
        let pointwise = is_pointwise(&geom);
        let cache = self.grad_enabled && !pointwise;
        let mut cols_all = if cache {
            vec![T::zero(); batch * plen * area]
        } else {
            Vec::new()
        };
        let mut scratch = if pointwise || cache {
            Vec::new()
        } else {
            vec![T::zero(); plen * area]
        };
        let mut out = vec![T::zero(); batch * out_ch * area];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let in_len = geom.channels * geom.height * geom.width;
        for bi in 0..batch {
            let img = &xv[bi * in_len..(bi + 1) * in_len];
            let cols: &[T] = if pointwise {
                img
            } else if cache {
                let c = &mut cols_all[bi * plen * area..(bi + 1) * plen * area];
                im2col(img, &geom, c);
                c
            } else {
                im2col(img, &geom, &mut scratch);
                &scratch
            };
            let dst = &mut out[bi * out_ch * area..(bi + 1) * out_ch * area];
            matmul(wv, out_ch, plen, false, cols, plen, area, false, dst, false);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (plane, &bb) in out.chunks_mut(area).zip(bv.iter().cycle()) {
                for v in plane {
                    *v = *v + bb;
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, out_ch, geom.out_height(), geom.out_width()], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: cols_all,
            },
            &parents,
        )
    }

    /// Spatio-temporal convolution over a frame stack `[T, C, H, W]`.
    ///
    /// Weights are laid out `[kt, O, C, k, k]`. Spatial padding keeps `H × W`;
    /// temporal taps sit `dilation` frames apart and read past either end of
    /// the stack by replicating the edge frame, so the output keeps `T` frames.
    pub fn conv3d_temporal(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv3d input must be [T,C,H,W]");
        assert_eq!(ws.len(), 5, "conv3d weight must be [kt,O,C,k,k]");
        assert_eq!(xs[1], ws[2], "conv3d channel mismatch");
        let (frames, kt, out_ch) = (xs[0], ws[0], ws[1]);
        let geom = Window2d {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[3],
            stride: 1,
            pad: ws[3] / 2,
        };
        let (plen, area) = (geom.patch_len(), geom.out_area());
        let in_len = geom.channels * geom.height * geom.width;
        let mut cols = vec![T::zero(); frames * plen * area];
        {
            let xv = self.value(x).data();
            for t in 0..frames {
                im2col(
                    &xv[t * in_len..(t + 1) * in_len],
                    &geom,
                    &mut cols[t * plen * area..(t + 1) * plen * area],
                );
            }
        }
        let wv = self.value(w).data();
        let tap_len = out_ch * plen;
        let mut out = vec![T::zero(); frames * out_ch * area];
        for t in 0..frames {
            let dst = &mut out[t * out_ch * area..(t + 1) * out_ch * area];
            for k in 0..kt {
                let s = temporal_source(t, k, kt, dilation, frames);
                matmul(
                    &wv[k * tap_len..(k + 1) * tap_len],
                    out_ch,
                    plen,
                    false,
                    &cols[s * plen * area..(s + 1) * plen * area],
                    plen,
                    area,
                    false,
                    dst,
                    k > 0,
                );
            }
        }
        let bv = self.value(b).data();
        for (plane, &bb) in out.chunks_mut(area).zip(bv.iter().cycle()) {
            for v in plane {
                *v = *v + bb;
            }
        }
        if !self.grad_enabled {
            cols = Vec::new();
        }
        let value = Tensor::from_parts(vec![frames, out_ch, geom.height, geom.width], out);
        self.push(
            value,
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                dilation,
                cols,
            },
            &[x, w, b],
        )
    }

    /// Max pooling over `[B, C, H, W]`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let geom = Window2d {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel,
            stride,
            pad,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let planes = xs[0] * xs[1];
        let plane = xs[2] * xs[3];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * plane;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ki in 0..kernel {
                        let y = (oy * stride + ki) as isize - pad as isize;
                        if y < 0 || y as usize >= xs[2] {
                            continue;
                        }
                        for kj in 0..kernel {
                            let xx = (ox * stride + kj) as isize - pad as isize;
                            if xx < 0 || xx as usize >= xs[3] {
                                continue;
                            }
                            let i = base + y as usize * xs[3] + xx as usize;
                            if best_i == usize::MAX || xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Tensor::from_parts(vec![xs[0], xs[1], ho, wo], out);
        self.record_branches(&argmax);
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Global max over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn spatial_max(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let plane = xs[2] * xs[3];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * xs[1]);
        let mut argmax = Vec::with_capacity(xs[0] * xs[1]);
        for (p, chunk) in xv.chunks(plane).enumerate() {
            let mut best_j = 0;
            for (j, &v) in chunk.iter().enumerate() {
                if v > chunk[best_j] {
                    best_j = j;
                }
            }
            out.push(chunk[best_j]);
            argmax.push(p * plane + best_j);
        }
        let value = Tensor::from_parts(vec![xs[0], xs[1]], out);
        self.record_branches(&argmax);
        self.push(value, Op::SpatialMax { x, argmax }, &[x])
    }

    /// Global average over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::from_usize_lossy(plane);
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(vec![xs[0], xs[1]], out);
        self.push(value, Op::SpatialMean { x }, &[x])
    }

    /// Per-channel `x * scale + shift` on `[B, C, ...]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (ch, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let sv = self.value(scale).data();
        let hv = self.value(shift).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let c = i % ch;
            for v in chunk {
                *v = *v * sv[c] + hv[c];
            }
        }
        self.push(out, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    // ----------------------------------------------------------------------
    // similarity and normalization

    /// `out[i][j] = -Σ_d (x[i][d] - x[j][d])²`, exactly symmetric with zero diagonal.
    pub fn neg_sq_dist(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            let xi = xv.row(i);
            for j in (i + 1)..n {
                let xj = xv.row(j);
                let d: T = xi.iter().zip(xj).map(|(&a, &b)| (a - b) * (a - b)).sum();
                out[i * n + j] = -d;
                out[j * n + i] = -d;
            }
        }
        self.push(
            Tensor::from_parts(vec![n, n], out),
            Op::NegSqDist { x },
            &[x],
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let eps = T::from_f64_lossy(1e-12);
        let mut out = xv.clone();
        let cols = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows { x }, &[x])
    }

    /// Normalizes each row to zero mean and unit variance, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let eps = T::from_f64_lossy(1e-5);
        let nf = T::from_usize_lossy(cols);
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in xhat.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(cols) {
            for ((v, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *v = *v * g + b;
            }
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        if !self.grad_enabled {
            xhat = Vec::new();
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Normalizes each column over the rows (per-sequence batch statistics),
    /// then applies per-column gain and bias.
    pub fn column_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let eps = T::from_f64_lossy(1e-5);
        let nf = T::from_usize_lossy(rows);
        let data = xv.data();
        let mut xhat = data.to_vec();
        let mut inv_std = Vec::with_capacity(cols);
        for c in 0..cols {
            let mean = (0..rows).map(|r| data[r * cols + c]).sum::<T>() / nf;
            let var = (0..rows)
                .map(|r| {
                    let d = data[r * cols + c] - mean;
                    d * d
                })
                .sum::<T>()
                / nf;
            let inv = T::one() / (var + eps).sqrt();
            for r in 0..rows {
                xhat[r * cols + c] = (data[r * cols + c] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(cols) {
            for ((v, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *v = *v * g + b;
            }
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        self.push(
            value,
            Op::ColumnNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    // ----------------------------------------------------------------------
    // layout

    /// Reorders the axes of a rank-3 tensor: output axis `a` is input axis `perm[a]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "permute3 needs a rank-3 tensor");
        let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let in_strides = [s[1] * s[2], s[2], 1];
        let src = xv.data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..out_shape[0] {
            for j in 0..out_shape[1] {
                for k in 0..out_shape[2] {
                    let idx = i * in_strides[perm[0]] + j * in_strides[perm[1]] + k * in_strides[perm[2]];
                    out.push(src[idx]);
                }
            }
        }
        let value = Tensor::from_parts(out_shape.to_vec(), out);
        self.push(value, Op::Permute3 { x, perm }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape preserves element count");
        self.push(value, Op::Reshape { x }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(start + len <= cols, "column slice out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                let t = self.value(v);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(t.row(r));
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols { xs: xs.to_vec() },
            xs,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        assert!(start + len <= xv.rows(), "row slice out of range");
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let out = xv.data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::SliceRows { x, start },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let mut shape = self.shape(xs[0]).to_vec();
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            assert_eq!(&t.shape()[1..], &shape[1..], "concat_rows shape mismatch");
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        shape[0] = rows;
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatRows { xs: xs.to_vec() },
            xs,
        )
    }

    /// `out[t] = x[t - shift]`, zero for `t < shift` (causal delay).
    pub fn shift_rows(&mut self, x: Var, shift: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); rows * cols];
        if shift < rows {
            out[shift * cols..].copy_from_slice(&xv.data()[..(rows - shift) * cols]);
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ShiftRows { x, shift },
            &[x],
        )
    }

    /// Broadcasts a single row `[1, n]` to `[rows, n]`.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "repeat_rows expects one row");
        let cols = xv.cols();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(xv.data());
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::RepeatRows { x },
            &[x],
        )
    }

    // ----------------------------------------------------------------------
    // losses

    /// Mean softmax cross-entropy over rows with a target; rows with `None`
    /// are masked out. Zero when every row is masked.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        assert_eq!(rows, targets.len(), "one target per row");
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, (row, target)) in probs.chunks_mut(classes).zip(targets).enumerate() {
            softmax_in_place(row);
            if let Some(t) = *target {
                assert!(t < classes, "target class out of range");
                total = total - log_softmax_at(lv.row(r), t);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize_lossy(count)
        };
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "one target per logit");
        let total: T = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let loss = total / T::from_usize_lossy(targets.len().max(1));
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    // ----------------------------------------------------------------------
    // backward

    /// Backpropagates from a scalar node. Panics if the graph was built with
    /// gradients disabled.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let params = self
            .params
            .iter()
            .map(|(name, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect();
        Gradients {
            params,
            nodes: grads,
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (y.rows(), y.cols());
                if self.wants(a) {
                    let ga = acc(grads, a, av.shape());
                    if ta {
                        matmul(bv.data(), bv.rows(), bv.cols(), tb, gy.data(), m, n, true, ga.data_mut(), true);
                    } else {
                        matmul(gy.data(), m, n, false, bv.data(), bv.rows(), bv.cols(), !tb, ga.data_mut(), true);
                    }
                }
                if self.wants(b) {
                    let gb = acc(grads, b, bv.shape());
                    if tb {
                        matmul(gy.data(), m, n, true, av.data(), av.rows(), av.cols(), ta, gb.data_mut(), true);
                    } else {
                        matmul(av.data(), av.rows(), av.cols(), !ta, gy.data(), m, n, false, gb.data_mut(), true);
                    }
                }
            }
            &Op::AddRow { x, b } => {
                if self.wants(x) {
                    acc(grads, x, gy.shape()).add_assign(gy);
                }
                if self.wants(b) {
                    let bshape = self.shape(b).to_vec();
                    let n = bshape.iter().product::<usize>();
                    let gb = acc(grads, b, &bshape);
                    for row in gy.data().chunks(n) {
                        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for p in [a, b] {
                    if self.wants(p) {
                        acc(grads, p, gy.shape()).add_assign(gy);
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (p, q) in [(a, b), (b, a)] {
                    if self.wants(p) {
                        let qv = self.value(q).data();
                        let gp = acc(grads, p, gy.shape());
                        for ((g, &d), &o) in gp.data_mut().iter_mut().zip(gy.data()).zip(qv) {
                            *g = *g + d * o;
                        }
                    }
                }
            }
            &Op::Scale { x, c } => {
                if self.wants(x) {
                    let gx = acc(grads, x, gy.shape());
                    for (g, &d) in gx.data_mut().iter_mut().zip(gy.data()) {
                        *g = *g + d * c;
                    }
                }
            }
            &Op::Relu { x } => {
                if self.wants(x) {
                    let gx = acc(grads, x, gy.shape());
                    for ((g, &d), &o) in gx.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
                        if o > T::zero() {
                            *g = *g + d;
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if self.wants(x) {
                    let gx = acc(grads, x, gy.shape());
                    for ((g, &d), &o) in gx.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
                        *g = *g + d * o * (T::one() - o);
                    }
                }
            }
            &Op::Tanh { x } => {
                if self.wants(x) {
                    let gx = acc(grads, x, gy.shape());
                    for ((g, &d), &o) in gx.data_mut().iter_mut().zip(gy.data()).zip(y.data()) {
                        *g = *g + d * (T::one() - o * o);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.backprop_conv2d(*x, *w, *b, geom, cols, gy, grads),
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                dilation,
                cols,
            } => self.backprop_conv3d(*x, *w, *b, geom, *dilation, cols, gy, grads),
            Op::MaxPool { x, argmax } | Op::SpatialMax { x, argmax } => {
                if self.wants(*x) {
                    let shape = self.shape(*x).to_vec();
                    let gx = acc(grads, *x, &shape);
                    let gd = gx.data_mut();
                    for (&src, &d) in argmax.iter().zip(gy.data()) {
                        gd[src] = gd[src] + d;
                    }
                }
            }
            &Op::SpatialMean { x } => {
                if self.wants(x) {
                    let shape = self.shape(x).to_vec();
                    let plane = shape[2] * shape[3];
                    let inv = T::one() / T::from_usize_lossy(plane);
                    let gx = acc(grads, x, &shape);
                    for (chunk, &d) in gx.data_mut().chunks_mut(plane).zip(gy.data()) {
                        for g in chunk {
                            *g = *g + d * inv;
                        }
                    }
                }
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let xs = self.shape(x).to_vec();
                let (ch, inner) = (xs[1], xs[2..].iter().product::<usize>());
                let sv = self.value(scale).data();
                let xv = self.value(x).data();
                if self.wants(x) {
                    let gx = acc(grads, x, &xs);
                    for (i, (gc, dc)) in gx
                        .data_mut()
                        .chunks_mut(inner)
                        .zip(gy.data().chunks(inner))
                        .enumerate()
                    {
                        let s = sv[i % ch];
                        for (g, &d) in gc.iter_mut().zip(dc) {
                            *g = *g + d * s;
                        }
                    }
                }
                let mut dscale = vec![T::zero(); ch];
                let mut dshift = vec![T::zero(); ch];
                for (i, (xc, dc)) in xv.chunks(inner).zip(gy.data().chunks(inner)).enumerate() {
                    let c = i % ch;
                    for (&xx, &d) in xc.iter().zip(dc) {
                        dscale[c] = dscale[c] + d * xx;
                        dshift[c] = dshift[c] + d;
                    }
                }
                if self.wants(scale) {
                    add_slice(acc(grads, scale, &[ch]).data_mut(), &dscale);
                }
                if self.wants(shift) {
                    add_slice(acc(grads, shift, &[ch]).data_mut(), &dshift);
                }
            }
            &Op::NegSqDist { x } => {
                if self.wants(x) {
                    // dX = -2 (diag(rowsum(G)) X - G X), G = gy + gyᵀ
                    let xv = self.value(x);
                    let (n, d) = (xv.rows(), xv.cols());
                    let gd = gy.data();
                    let mut sym = vec![T::zero(); n * n];
                    for r in 0..n {
                        for c in 0..n {
                            sym[r * n + c] = gd[r * n + c] + gd[c * n + r];
                        }
                    }
                    let mut gx_local = vec![T::zero(); n * d];
                    matmul(&sym, n, n, false, xv.data(), n, d, false, &mut gx_local, false);
                    let two = T::from_f64_lossy(2.0);
                    let gx = acc(grads, x, xv.shape());
                    let gxd = gx.data_mut();
                    for r in 0..n {
                        let rs: T = sym[r * n..(r + 1) * n].iter().copied().sum();
                        for c in 0..d {
                            let v = rs * xv.data()[r * d + c] - gx_local[r * d + c];
                            gxd[r * d + c] = gxd[r * d + c] - two * v;
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let cols = y.cols();
                    let gx = acc(grads, *x, y.shape());
                    for (((g, yr), dr), &norm) in gx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(gy.data().chunks(cols))
                        .zip(norms)
                    {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((gv, &yv), &dv) in g.iter_mut().zip(yr).zip(dr) {
                            *gv = *gv + (dv - yv * dot) / norm;
                        }
                    }
                }
            }
            &Op::SoftmaxRows { x } => {
                if self.wants(x) {
                    let cols = y.cols();
                    let gx = acc(grads, x, y.shape());
                    for ((g, yr), dr) in gx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(gy.data().chunks(cols))
                    {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((gv, &yv), &dv) in g.iter_mut().zip(yr).zip(dr) {
                            *gv = *gv + yv * (dv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = y.cols();
                let gv = self.value(*gain).data();
                let nf = T::from_usize_lossy(cols);
                if self.wants(*x) {
                    let gx = acc(grads, *x, y.shape());
                    for (r, (g, dr)) in gx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(gy.data().chunks(cols))
                        .enumerate()
                    {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let dxh: Vec<T> = dr.iter().zip(gv).map(|(&d, &gg)| d * gg).collect();
                        let sum: T = dxh.iter().copied().sum();
                        let dot: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let inv = inv_std[r];
                        for ((gx_v, &dh), &xh_v) in g.iter_mut().zip(&dxh).zip(xh) {
                            *gx_v = *gx_v + inv / nf * (nf * dh - sum - xh_v * dot);
                        }
                    }
                }
                self.backprop_gain_bias(*gain, *bias, xhat, gy, cols, grads);
            }
            Op::ColumnNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = (y.rows(), y.cols());
                let gv = self.value(*gain).data();
                let nf = T::from_usize_lossy(rows);
                if self.wants(*x) {
                    let gx = acc(grads, *x, y.shape());
                    let gxd = gx.data_mut();
                    let gd = gy.data();
                    for c in 0..cols {
                        let mut sum = T::zero();
                        let mut dot = T::zero();
                        for r in 0..rows {
                            let dh = gd[r * cols + c] * gv[c];
                            sum = sum + dh;
                            dot = dot + dh * xhat[r * cols + c];
                        }
                        let inv = inv_std[c];
                        for r in 0..rows {
                            let dh = gd[r * cols + c] * gv[c];
                            let idx = r * cols + c;
                            gxd[idx] = gxd[idx] + inv / nf * (nf * dh - sum - xhat[idx] * dot);
                        }
                    }
                }
                self.backprop_gain_bias(*gain, *bias, xhat, gy, cols, grads);
            }
            &Op::Permute3 { x, perm } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    let in_strides = [s[1] * s[2], s[2], 1];
                    let os = y.shape();
                    let gx = acc(grads, x, &s);
                    let gxd = gx.data_mut();
                    let mut it = gy.data().iter();
                    for i in 0..os[0] {
                        for j in 0..os[1] {
                            for k in 0..os[2] {
                                let idx = i * in_strides[perm[0]]
                                    + j * in_strides[perm[1]]
                                    + k * in_strides[perm[2]];
                                gxd[idx] = gxd[idx] + *it.next().expect("same length");
                            }
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    add_slice(acc(grads, x, &s).data_mut(), gy.data());
                }
            }
            &Op::SliceCols { x, start } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    let cols: usize = s[1..].iter().product();
                    let len = y.cols();
                    let gx = acc(grads, x, &s);
                    for (g, d) in gx.data_mut().chunks_mut(cols).zip(gy.data().chunks(len)) {
                        add_slice(&mut g[start..start + len], d);
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let total = y.cols();
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v).to_vec();
                    let len: usize = s[1..].iter().product();
                    if self.wants(v) {
                        let gv = acc(grads, v, &s);
                        for (g, d) in gv.data_mut().chunks_mut(len).zip(gy.data().chunks(total)) {
                            add_slice(g, &d[offset..offset + len]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::SliceRows { x, start } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    let cols = y.cols();
                    let gx = acc(grads, x, &s);
                    add_slice(&mut gx.data_mut()[start * cols..start * cols + gy.len()], gy.data());
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v).to_vec();
                    let len: usize = s.iter().product();
                    if self.wants(v) {
                        add_slice(acc(grads, v, &s).data_mut(), &gy.data()[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::ShiftRows { x, shift } => {
                if self.wants(x) {
                    let (rows, cols) = (y.rows(), y.cols());
                    let gx = acc(grads, x, y.shape());
                    if shift < rows {
                        add_slice(
                            &mut gx.data_mut()[..(rows - shift) * cols],
                            &gy.data()[shift * cols..],
                        );
                    }
                }
            }
            &Op::RepeatRows { x } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    let cols = y.cols();
                    let gx = acc(grads, x, &s);
                    for row in gy.data().chunks(cols) {
                        add_slice(gx.data_mut(), row);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    if count > 0 {
                        let s = self.shape(*logits).to_vec();
                        let classes = s[1..].iter().product::<usize>();
                        let scale = gy.data()[0] / T::from_usize_lossy(count);
                        let gl = acc(grads, *logits, &s);
                        for ((g, p), t) in gl
                            .data_mut()
                            .chunks_mut(classes)
                            .zip(probs.chunks(classes))
                            .zip(targets)
                        {
                            if let Some(t) = *t {
                                for (c, (gv, &pv)) in g.iter_mut().zip(p).enumerate() {
                                    let onehot = if c == t { T::one() } else { T::zero() };
                                    *gv = *gv + (pv - onehot) * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                if self.wants(*logits) {
                    let s = self.shape(*logits).to_vec();
                    let lv = self.value(*logits).data();
                    let scale = gy.data()[0] / T::from_usize_lossy(targets.len().max(1));
                    let gl = acc(grads, *logits, &s);
                    for ((g, &z), &t) in gl.data_mut().iter_mut().zip(lv).zip(targets) {
                        *g = *g + (sigmoid(z) - t) * scale;
                    }
                }
            }
        }
    }

    fn backprop_gain_bias(
        &self,
        gain: Var,
        bias: Var,
        xhat: &[T],
        gy: &Tensor<T>,
        cols: usize,
        grads: &mut [Option<Tensor<T>>],
    ) {
        if self.wants(gain) {
            let mut dg = vec![T::zero(); cols];
            for (xr, dr) in xhat.chunks(cols).zip(gy.data().chunks(cols)) {
                for ((g, &x), &d) in dg.iter_mut().zip(xr).zip(dr) {
                    *g = *g + x * d;
                }
            }
            let s = self.shape(gain).to_vec();
            add_slice(acc(grads, gain, &s).data_mut(), &dg);
        }
        if self.wants(bias) {
            let s = self.shape(bias).to_vec();
            let gb = acc(grads, bias, &s);
            for dr in gy.data().chunks(cols) {
                add_slice(gb.data_mut(), dr);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &Window2d,
        cols_all: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, out_ch) = (xs[0], ws[0]);
        let (plen, area) = (geom.patch_len(), geom.out_area());
        let in_len = geom.channels * geom.height * geom.width;
        let pointwise = is_pointwise(geom);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = gy.data();
        if let Some(b) = b {
            if self.wants(b) {
                let gb = acc(grads, b, &[out_ch]);
                for (plane, g) in gd.chunks(area).zip((0..out_ch).cycle()) {
                    let s: T = plane.iter().copied().sum();
                    gb.data_mut()[g] = gb.data_mut()[g] + s;
                }
            }
        }
        if self.wants(w) {
            let gw = acc(grads, w, &ws);
            for bi in 0..batch {
                let cols = if pointwise {
                    &xv[bi * in_len..(bi + 1) * in_len]
                } else {
                    &cols_all[bi * plen * area..(bi + 1) * plen * area]
                };
                let dout = &gd[bi * out_ch * area..(bi + 1) * out_ch * area];
                matmul(dout, out_ch, area, false, cols, plen, area, true, gw.data_mut(), true);
            }
        }
        if self.wants(x) {
            let gx = acc(grads, x, &xs);
            let mut dcols = vec![T::zero(); plen * area];
            for bi in 0..batch {
                let dout = &gd[bi * out_ch * area..(bi + 1) * out_ch * area];
                let dst = &mut gx.data_mut()[bi * in_len..(bi + 1) * in_len];
                if pointwise {
                    matmul(wv, out_ch, plen, true, dout, out_ch, area, false, dst, true);
                } else {
                    matmul(wv, out_ch, plen, true, dout, out_ch, area, false, &mut dcols, false);
                    col2im(&dcols, geom, dst);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv3d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &Window2d,
        dilation: usize,
        cols: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (frames, kt, out_ch) = (xs[0], ws[0], ws[1]);
        let (plen, area) = (geom.patch_len(), geom.out_area());
        let tap_len = out_ch * plen;
        let wv = self.value(w).data();
        let gd = gy.data();
        if self.wants(b) {
            let gb = acc(grads, b, &[out_ch]);
            for (plane, g) in gd.chunks(area).zip((0..out_ch).cycle()) {
                let s: T = plane.iter().copied().sum();
                gb.data_mut()[g] = gb.data_mut()[g] + s;
            }
        }
        if self.wants(w) {
            let gw = acc(grads, w, &ws);
            for t in 0..frames {
                let dout = &gd[t * out_ch * area..(t + 1) * out_ch * area];
                for k in 0..kt {
                    let s = temporal_source(t, k, kt, dilation, frames);
                    matmul(
                        dout,
                        out_ch,
                        area,
                        false,
                        &cols[s * plen * area..(s + 1) * plen * area],
                        plen,
                        area,
                        true,
                        &mut gw.data_mut()[k * tap_len..(k + 1) * tap_len],
                        true,
                    );
                }
            }
        }
        if self.wants(x) {
            let mut dcols = vec![T::zero(); frames * plen * area];
            for t in 0..frames {
                let dout = &gd[t * out_ch * area..(t + 1) * out_ch * area];
                for k in 0..kt {
                    let s = temporal_source(t, k, kt, dilation, frames);
                    matmul(
                        &wv[k * tap_len..(k + 1) * tap_len],
                        out_ch,
                        plen,
                        true,
                        dout,
                        out_ch,
                        area,
                        false,
                        &mut dcols[s * plen * area..(s + 1) * plen * area],
                        true,
                    );
                }
            }
            let in_len = geom.channels * geom.height * geom.width;
            let gx = acc(grads, x, &xs);
            for t in 0..frames {
                col2im(
                    &dcols[t * plen * area..(t + 1) * plen * area],
                    geom,
                    &mut gx.data_mut()[t * in_len..(t + 1) * in_len],
                );
            }
        }
    }
}

fn is_pointwise(g: &Window2d) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

/// Source frame of temporal tap `k` for output frame `t`, clamped to the stack.
pub(crate) fn temporal_source(t: usize, k: usize, kt: usize, dilation: usize, frames: usize) -> usize {
    let offset = (k as isize - (kt / 2) as isize) * dilation as isize;
    (t as isize + offset).clamp(0, frames as isize - 1) as usize
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_slice<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn log_softmax_at<T: Scalar>(row: &[T], class: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[class] - lse
}

#[cfg(test)]
mod tests;
