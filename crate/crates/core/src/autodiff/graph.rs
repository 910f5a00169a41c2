//! Eager tape for reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node holding its
//! value and enough context to run its backward rule. Nodes are only ever
//! appended, so the tape is topologically ordered by construction and
//! `backward` simply walks it in reverse.

use crate::autodiff::kernels::{self, CanvasLayout, ConvGeom, SampleGeom};
use crate::autodiff::{Real, Tensor};
use crate::error::{AsrError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalisation behaviour for a single call.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train { eps: T },
    /// Normalise with externally tracked running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Pow(Var, T),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Elu(Var, T),
    Sigmoid(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<T>,
    },
    Crop {
        input: Var,
        margin: usize,
    },
    GatherCells {
        input: Var,
        start: usize,
    },
    ChannelScale {
        input: Var,
        scales: Var,
    },
    EllipseAffine(Var),
    AffineGrid(Var),
    GridSample {
        input: Var,
        grid: Var,
        geom: SampleGeom,
    },
    FuseCanvas {
        rasters: Var,
        layout: CanvasLayout,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Operation tape. One graph is built per forward pass and dropped after
/// the gradients have been read out.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AsrError::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are only accumulated for leaves created
    /// with `requires_grad` and the nodes downstream of them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise -------------------------------------------------

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Elementwise `x^p`. The derivative at `x == 0` is taken as 0 for
    /// exponents below 1, where it would otherwise be unbounded.
    pub fn pow(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::Pow(a, p), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn elu(&mut self, a: Var, alpha: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { alpha * x.exp_m1() });
        self.push(value, Op::Elu(a, alpha), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Flattens `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = *shape.first().ok_or_else(|| AsrError::shape("flatten", "scalar input"))?;
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    // ---- layers ------------------------------------------------------

    /// 2-d convolution of `[N, C, H, W]` with `[F, C, kh, kw]` plus bias `[F]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [f, wc, kh, kw] = self.value(weight).dims4("conv2d")?;
        if stride == 0 {
            return Err(AsrError::Contract("conv2d stride must be >= 1".into()));
        }
        if wc != c {
            return Err(AsrError::dim("conv2d", "channels", c, wc));
        }
        if self.shape(bias) != [f] {
            return Err(AsrError::dim("conv2d", "bias", f, self.value(bias).len()));
        }
        if kh > h + 2 * padding {
            return Err(AsrError::dim("conv2d", "height", kh, h + 2 * padding));
        }
        if kw > w + 2 * padding {
            return Err(AsrError::dim("conv2d", "width", kw, w + 2 * padding));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    /// Per-channel batch normalisation of `[N, C, H, W]`.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(AsrError::dim("batch_norm2d", name, c, self.value(v).len()));
            }
        }
        let hw = h * w;
        let count = n * hw;
        let x = self.value(input).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                if n < 2 {
                    return Err(AsrError::Config(format!(
                        "batch norm in training mode needs a batch of at least 2, got {n}"
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let cnt = T::lit(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &xv in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / cnt;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(AsrError::dim("batch_norm2d", "running stats", c, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("max_pool2d")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(AsrError::shape("max_pool2d", format!("input {h}x{w} too small")));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("upsample_nearest2x")?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2(input), &[input]))
    }

    /// Affine map `[N, I] -> [N, O]` with weight `[O, I]` and bias `[O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, i) = match self.shape(input) {
            &[n, i] => (n, i),
            s => return Err(AsrError::shape("dense", format!("expected [N, I] input, got {s:?}"))),
        };
        let (o, wi) = match self.shape(weight) {
            &[o, wi] => (o, wi),
            s => return Err(AsrError::shape("dense", format!("expected [O, I] weight, got {s:?}"))),
        };
        if wi != i {
            return Err(AsrError::dim("dense", "features", i, wi));
        }
        if self.shape(bias) != [o] {
            return Err(AsrError::dim("dense", "bias", o, self.value(bias).len()));
        }
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        T::gemm(n, i, o, T::one(), self.value(input).data(), i, 1, self.value(weight).data(), 1, i, T::one(), &mut out, o, 1);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    // ---- renderer support -------------------------------------------

    /// `y[n, c, ...] = x[n, c, ...] * scale[c] + offset[c]` with constant
    /// per-channel coefficients.
    pub fn channel_affine(&mut self, input: Var, scale: &[T], offset: &[T]) -> Result<Var> {
        let t = self.value(input);
        let (n, c) = match t.shape() {
            [n, c, ..] => (*n, *c),
            s => return Err(AsrError::shape("channel_affine", format!("expected [N, C, ...], got {s:?}"))),
        };
        if scale.len() != c || offset.len() != c {
            return Err(AsrError::dim("channel_affine", "channels", c, scale.len()));
        }
        let inner = t.len() / (n * c).max(1);
        let mut out = t.data().to_vec();
        for (k, chunk) in out.chunks_exact_mut(inner).enumerate() {
            let ch = k % c;
            for v in chunk {
                *v = *v * scale[ch] + offset[ch];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            &[input],
        ))
    }

    /// Drops a `margin`-pixel border from `[N, C, H, W]`.
    pub fn crop(&mut self, input: Var, margin: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("crop")?;
        if 2 * margin >= h || 2 * margin >= w {
            return Err(AsrError::Config(format!("margin {margin} leaves no interior in a {h}x{w} image")));
        }
        let (ih, iw) = (h - 2 * margin, w - 2 * margin);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ih * iw);
        for p in 0..n * c {
            for y in margin..h - margin {
                let row = p * h * w + y * w;
                out.extend_from_slice(&x[row + margin..row + w - margin]);
            }
        }
        let value = Tensor::new(vec![n, c, ih, iw], out)?;
        Ok(self.push(value, Op::Crop { input, margin }, &[input]))
    }

    /// Rearranges channels `start..end` of `[N, C, gh, gw]` into rows
    /// `[N * gh * gw, end - start]`, cell-major.
    pub fn gather_cells(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let [n, c, gh, gw] = self.value(input).dims4("gather_cells")?;
        if start >= end || end > c {
            return Err(AsrError::shape("gather_cells", format!("channel range {start}..{end} outside 0..{c}")));
        }
        let k = end - start;
        let cells = gh * gw;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * cells * k];
        for b in 0..n {
            for cell in 0..cells {
                for j in 0..k {
                    out[(b * cells + cell) * k + j] = x[(b * c + start + j) * cells + cell];
                }
            }
        }
        let value = Tensor::new(vec![n * cells, k], out)?;
        Ok(self.push(value, Op::GatherCells { input, start }, &[input]))
    }

    /// Multiplies each channel plane by a per-sample scale.
    ///
    /// `input` is `[N, Ci, H, W]` with `Ci` either 1 (broadcast) or `C`;
    /// `scales` is `[N, C]`. The output is `[N, C, H, W]`.
    pub fn channel_scale(&mut self, input: Var, scales: Var) -> Result<Var> {
        let [n, ci, h, w] = self.value(input).dims4("channel_scale")?;
        let (sn, c) = match self.shape(scales) {
            &[sn, c] => (sn, c),
            s => return Err(AsrError::shape("channel_scale", format!("expected [N, C] scales, got {s:?}"))),
        };
        if sn != n {
            return Err(AsrError::dim("channel_scale", "batch", n, sn));
        }
        if ci != 1 && ci != c {
            return Err(AsrError::dim("channel_scale", "channels", c, ci));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let s = self.value(scales).data();
        let mut out = vec![T::zero(); n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &x[(b * ci + if ci == 1 { 0 } else { ch }) * hw..][..hw];
                let k = s[b * c + ch];
                for (o, &v) in out[(b * c + ch) * hw..][..hw].iter_mut().zip(src) {
                    *o = v * k;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelScale { input, scales }, &[input, scales]))
    }

    /// Maps rows `(w, h, d)` of `[B, 3]` (or the first three columns of a
    /// wider matrix) to the inverse sampling transform `[B, 2, 3]` of an
    /// ellipse scaled by `(w, h)` and rotated by `d` about the origin.
    pub fn ellipse_affine(&mut self, params: Var) -> Result<Var> {
        let (b, k) = match self.shape(params) {
            &[b, k] if k >= 3 => (b, k),
            s => return Err(AsrError::shape("ellipse_affine", format!("expected [B, >=3], got {s:?}"))),
        };
        let p = self.value(params).data();
        let mut out = vec![T::zero(); b * 6];
        for r in 0..b {
            let (w, h, d) = (p[r * k], p[r * k + 1], p[r * k + 2]);
            let (s, c) = d.sin_cos();
            out[r * 6] = c / w;
            out[r * 6 + 1] = s / w;
            out[r * 6 + 3] = -s / h;
            out[r * 6 + 4] = c / h;
        }
        let value = Tensor::new(vec![b, 2, 3], out)?;
        Ok(self.push(value, Op::EllipseAffine(params), &[params]))
    }

    /// Sampling grid `[B, side, side, 2]` for transforms `[B, 2, 3]` over
    /// align-corners normalised coordinates.
    pub fn affine_grid(&mut self, theta: Var, side: usize) -> Result<Var> {
        let b = match self.shape(theta) {
            &[b, 2, 3] => b,
            s => return Err(AsrError::shape("affine_grid", format!("expected [B, 2, 3], got {s:?}"))),
        };
        let th = self.value(theta).data();
        let base = normalized_coords::<T>(side);
        let mut out = vec![T::zero(); b * side * side * 2];
        for k in 0..b {
            let t = &th[k * 6..k * 6 + 6];
            for y in 0..side {
                for x in 0..side {
                    let (xn, yn) = (base[x], base[y]);
                    let o = ((k * side + y) * side + x) * 2;
                    out[o] = t[0] * xn + t[1] * yn + t[2];
                    out[o + 1] = t[3] * xn + t[4] * yn + t[5];
                }
            }
        }
        let value = Tensor::new(vec![b, side, side, 2], out)?;
        Ok(self.push(value, Op::AffineGrid(theta), &[theta]))
    }

    /// Batched bilinear sampling with zero padding.
    ///
    /// `input` is `[Bi, C, H, W]` with `Bi` either 1 (shared) or `B`; `grid`
    /// is `[B, H', W', 2]` holding `(x, y)` in `[-1, 1]` (align-corners).
    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let [bi, c, h, w] = self.value(input).dims4("grid_sample")?;
        let (b, oh, ow) = match self.shape(grid) {
            &[b, oh, ow, 2] => (b, oh, ow),
            &[_, _, _, last] => return Err(AsrError::dim("grid_sample", "grid last", 2, last)),
            s => return Err(AsrError::shape("grid_sample", format!("expected [B, H, W, 2] grid, got {s:?}"))),
        };
        if bi != 1 && bi != b {
            return Err(AsrError::dim("grid_sample", "batch", b, bi));
        }
        let geom = SampleGeom {
            batch: b,
            shared_input: bi == 1,
            c,
            h,
            w,
            oh,
            ow,
        };
        let out = kernels::grid_sample_forward(&geom, self.value(input).data(), self.value(grid).data());
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, Op::GridSample { input, grid, geom }, &[input, grid]))
    }

    /// Multiplicative fusion of per-cell rasters `[N * cells, C, s, s]` into
    /// canvases `[N, C, H, W]`: every pixel holds the product of `1 - R` over
    /// the rasters covering it; uncovered pixels hold 1.
    pub fn fuse_canvas(&mut self, rasters: Var, layout: CanvasLayout) -> Result<Var> {
        let [b, c, s, s2] = self.value(rasters).dims4("fuse_canvas")?;
        if s != s2 {
            return Err(AsrError::dim("fuse_canvas", "raster width", s, s2));
        }
        if b != layout.batch * layout.cells() {
            return Err(AsrError::dim("fuse_canvas", "rasters", layout.batch * layout.cells(), b));
        }
        let out = kernels::fuse_forward(&layout, c, s, self.value(rasters).data());
        let value = Tensor::new(vec![layout.batch, c, layout.height, layout.width], out)?;
        Ok(self.push(value, Op::FuseCanvas { rasters, layout }, &[rasters]))
    }

    /// Hash of the active linear piece of every piecewise operation on the
    /// tape: relu and elu input signs, max-pool winners and the lattice
    /// cells read by bilinear sampling. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn piece_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) | Op::Elu(a, _) => {
                    k.hash(&mut h);
                    for v in self.value(*a).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    k.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::GridSample { grid, geom, .. } => {
                    k.hash(&mut h);
                    for (i, v) in self.value(*grid).data().iter().enumerate() {
                        let extent = if i % 2 == 0 { geom.w } else { geom.h };
                        let px = (v.as_f64() + 1.0) * 0.5 * (extent as f64 - 1.0);
                        (px.floor() as i64).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d loss / d v` into every node that depends on a
    /// gradient-requiring leaf. Previously stored gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AsrError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let seed = Tensor::full(lt.shape(), T::one());
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, t) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data);
        let mut res = Vec::new();
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        res.push((v, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    res.push((*a, g.clone()));
                }
                if need(*b) {
                    res.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    res.push((*a, like(*a, d)?));
                }
                if need(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    res.push((*b, like(*b, d)?));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.map(|x| x * *s))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Pow(a, p) => {
                let p = *p;
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| {
                        if x == T::zero() && p < T::one() {
                            T::zero()
                        } else {
                            gv * p * x.powf(p - T::one())
                        }
                    })
                    .collect();
                res.push((*a, like(*a, d)?));
            }
            Op::Sum(a) => res.push((*a, Tensor::full(val(*a).shape(), gd[0]))),
            Op::Mean(a) => {
                let n = T::lit(val(*a).len() as f64);
                res.push((*a, Tensor::full(val(*a).shape(), gd[0] / n)));
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                res.push((*a, like(*a, d)?));
            }
            Op::Elu(a, alpha) => {
                // alpha * exp(x) == y + alpha on the negative side
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .zip(out.data())
                    .map(|((&gv, &x), &y)| if x > T::zero() { gv } else { gv * (y + *alpha) })
                    .collect();
                res.push((*a, like(*a, d)?));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                res.push((*a, like(*a, d)?));
            }
            Op::Reshape(a) => res.push((*a, like(*a, gd.to_vec())?)),
            Op::Conv2d { input, weight, bias, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    val(*input).data(),
                    val(*weight).data(),
                    gd,
                    need(*input),
                    need(*weight),
                    need(*bias),
                );
                if need(*input) {
                    res.push((*input, like(*input, dx)?));
                }
                if need(*weight) {
                    res.push((*weight, like(*weight, dw)?));
                }
                if need(*bias) {
                    res.push((*bias, like(*bias, db)?));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = val(*input).dims4("batch_norm2d")?;
                let hw = h * w;
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                if need(*input) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let m = T::lit((n * hw) as f64);
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for b in 0..n {
                            for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                dx[j] = if *train {
                                    k * (gd[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                    res.push((*input, like(*input, dx)?));
                }
                if need(*gamma) {
                    res.push((*gamma, like(*gamma, dgamma)?));
                }
                if need(*beta) {
                    res.push((*beta, like(*beta, dbeta)?));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                res.push((*input, like(*input, dx)?));
            }
            Op::Upsample2(input) => {
                let [n, c, h, w] = val(*input).dims4("upsample_nearest2x")?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            dx[p * h * w + (y / 2) * w + x / 2] += gd[p * oh * ow + y * ow + x];
                        }
                    }
                }
                res.push((*input, like(*input, dx)?));
            }
            Op::Dense { input, weight, bias } => {
                let (n, ii) = (val(*input).shape()[0], val(*input).shape()[1]);
                let o = val(*weight).shape()[0];
                if need(*input) {
                    let mut dx = vec![T::zero(); n * ii];
                    T::gemm(n, o, ii, T::one(), gd, o, 1, val(*weight).data(), ii, 1, T::zero(), &mut dx, ii, 1);
                    res.push((*input, like(*input, dx)?));
                }
                if need(*weight) {
                    let mut dw = vec![T::zero(); o * ii];
                    T::gemm(o, n, ii, T::one(), gd, 1, o, val(*input).data(), ii, 1, T::zero(), &mut dw, ii, 1);
                    res.push((*weight, like(*weight, dw)?));
                }
                if need(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks_exact(o) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    res.push((*bias, like(*bias, db)?));
                }
            }
            Op::ChannelAffine { input, scale } => {
                let c = scale.len();
                let inner = gd.len() / (val(*input).shape()[0] * c).max(1);
                let mut dx = gd.to_vec();
                for (k, chunk) in dx.chunks_exact_mut(inner).enumerate() {
                    for v in chunk {
                        *v *= scale[k % c];
                    }
                }
                res.push((*input, like(*input, dx)?));
            }
            Op::Crop { input, margin } => {
                let [n, c, h, w] = val(*input).dims4("crop")?;
                let m = *margin;
                let iw = w - 2 * m;
                let mut dx = vec![T::zero(); n * c * h * w];
                let mut k = 0;
                for p in 0..n * c {
                    for y in m..h - m {
                        let row = p * h * w + y * w + m;
                        dx[row..row + iw].copy_from_slice(&gd[k..k + iw]);
                        k += iw;
                    }
                }
                res.push((*input, like(*input, dx)?));
            }
            Op::GatherCells { input, start } => {
                let [n, c, gh, gw] = val(*input).dims4("gather_cells")?;
                let cells = gh * gw;
                let k = out.shape()[1];
                let mut dx = vec![T::zero(); n * c * cells];
                for b in 0..n {
                    for cell in 0..cells {
                        for j in 0..k {
                            dx[(b * c + start + j) * cells + cell] = gd[(b * cells + cell) * k + j];
                        }
                    }
                }
                res.push((*input, like(*input, dx)?));
            }
            Op::ChannelScale { input, scales } => {
                let [n, ci, h, w] = val(*input).dims4("channel_scale")?;
                let c = val(*scales).shape()[1];
                let hw = h * w;
                let x = val(*input).data();
                let s = val(*scales).data();
                let mut dx = vec![T::zero(); x.len()];
                let mut ds = vec![T::zero(); s.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let src = (b * ci + if ci == 1 { 0 } else { ch }) * hw;
                        let go = &gd[(b * c + ch) * hw..][..hw];
                        let k = s[b * c + ch];
                        let mut acc = T::zero();
                        for (j, &gv) in go.iter().enumerate() {
                            acc += gv * x[src + j];
                            dx[src + j] += gv * k;
                        }
                        ds[b * c + ch] = acc;
                    }
                }
                if need(*input) {
                    res.push((*input, like(*input, dx)?));
                }
                if need(*scales) {
                    res.push((*scales, like(*scales, ds)?));
                }
            }
            Op::EllipseAffine(params) => {
                let (b, k) = (val(*params).shape()[0], val(*params).shape()[1]);
                let p = val(*params).data();
                let mut dp = vec![T::zero(); p.len()];
                for r in 0..b {
                    let (w, h, d) = (p[r * k], p[r * k + 1], p[r * k + 2]);
                    let (s, c) = d.sin_cos();
                    let gt = &gd[r * 6..r * 6 + 6];
                    // theta row 0 = (c, s) / w, row 1 = (-s, c) / h
                    dp[r * k] = -(gt[0] * c + gt[1] * s) / (w * w);
                    dp[r * k + 1] = -(gt[3] * -s + gt[4] * c) / (h * h);
                    dp[r * k + 2] = (gt[0] * -s + gt[1] * c) / w + (gt[3] * -c + gt[4] * -s) / h;
                }
                res.push((*params, like(*params, dp)?));
            }
            Op::AffineGrid(theta) => {
                let b = val(*theta).shape()[0];
                let side = out.shape()[1];
                let base = normalized_coords::<T>(side);
                let mut dt = vec![T::zero(); b * 6];
                for k in 0..b {
                    let acc = &mut dt[k * 6..k * 6 + 6];
                    for y in 0..side {
                        for x in 0..side {
                            let o = ((k * side + y) * side + x) * 2;
                            let (xn, yn) = (base[x], base[y]);
                            let (g0, g1) = (gd[o], gd[o + 1]);
                            acc[0] += g0 * xn;
                            acc[1] += g0 * yn;
                            acc[2] += g0;
                            acc[3] += g1 * xn;
                            acc[4] += g1 * yn;
                            acc[5] += g1;
                        }
                    }
                }
                res.push((*theta, like(*theta, dt)?));
            }
            Op::GridSample { input, grid, geom } => {
                let (din, dgrid) = kernels::grid_sample_backward(
                    geom,
                    val(*input).data(),
                    val(*grid).data(),
                    gd,
                    need(*input),
                    need(*grid),
                );
                if need(*input) {
                    res.push((*input, like(*input, din)?));
                }
                if need(*grid) {
                    res.push((*grid, like(*grid, dgrid)?));
                }
            }
            Op::FuseCanvas { rasters, layout } => {
                let shape = val(*rasters).shape();
                let d = kernels::fuse_backward(layout, shape[1], shape[2], val(*rasters).data(), gd);
                res.push((*rasters, like(*rasters, d)?));
            }
        }
        Ok(res)
    }
}

/// Align-corners normalised coordinates `-1 + 2 i / (side - 1)`.
pub(crate) fn normalized_coords<T: Real>(side: usize) -> Vec<T> {
    if side == 1 {
        return vec![T::zero()];
    }
    (0..side)
        .map(|i| T::lit(-1.0 + 2.0 * i as f64 / (side - 1) as f64))
        .collect()
}
