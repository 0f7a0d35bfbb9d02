//! Tape of recorded operations and their reverse-mode adjoints.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Normalize with the batch's own statistics.
    Batch { eps: f64 },
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when the reduction has a single element).
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    SmoothL1(Var),
    Sum(Var),
    DotConst(Var, Vec<f64>),
    SumAxis1(Var),
    RowNormalize {
        x: Var,
        eps: f64,
    },
    RowNorm(Var),
    Gather {
        xs: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records values and the operations that produced them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when it never received one.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// (N, C, inner) view of an axis-1 tensor.
fn axis1(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product();
    (n, c, inner)
}

/// Output positions `o` in `0..out_len` for which `o*stride + offset - pad` is inside `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > offset {
        (in_len + pad - offset).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn window_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || size + 2 * pad < kernel {
        return Err(Error::invalid(format!(
            "window {kernel}/{stride} with pad {pad} does not fit size {size}"
        )));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).detached().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// 2-D convolution over NCHW input with weights `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::invalid(format!("conv2d: bad shapes input {xs:?} weight {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::invalid("conv2d: bias length mismatch"));
            }
        }
        let ho = window_out(h, k, stride, pad)?;
        let wo = window_out(wd, k, stride, pad)?;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * cout * ho * wo];
        let plane = ho * wo;
        for ni in 0..n {
            for oc in 0..cout {
                let o = &mut out[(ni * cout + oc) * plane..(ni * cout + oc + 1) * plane];
                if let Some(bias) = bias {
                    o.iter_mut().for_each(|v| *v = bias[oc]);
                }
                for ic in 0..cin {
                    let src = &xin[(ni * cin + ic) * h * wd..(ni * cin + ic + 1) * h * wd];
                    for ky in 0..k {
                        let (ylo, yhi) = valid_range(ho, h, ky, stride, pad);
                        for kx in 0..k {
                            let (xlo, xhi) = valid_range(wo, wd, kx, stride, pad);
                            let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                            for oy in ylo..yhi {
                                let iy = oy * stride + ky - pad;
                                let srow = &src[iy * wd..(iy + 1) * wd];
                                let orow = &mut o[oy * wo..(oy + 1) * wo];
                                if stride == 1 {
                                    let off = xlo + kx - pad;
                                    for (ov, sv) in orow[xlo..xhi].iter_mut().zip(&srow[off..]) {
                                        *ov += wv * sv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        orow[ox] += wv * srow[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, cout, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Per-channel batch normalization over axis 1 of `x`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("batch_norm: input needs a channel axis"));
        }
        let (n, c, inner) = axis1(&shape);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::invalid(format!(
                "batch_norm: {c} channels but gamma/beta have {}/{}",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        let xd = self.value(x).data();
        let m = (n * inner) as f64;
        let (mean, var_b, eps, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let s = &xd[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                        mean[ci] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for ni in 0..n {
                    for ci in 0..c {
                        let s = &xd[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                        var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::invalid("batch_norm: running stats length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + b[ci];
                }
            }
        }
        let moments = batch_stats.then(|| {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            BatchMoments {
                mean: mean.clone(),
                var: var_b.iter().map(|v| v * unbias).collect(),
            }
        });
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, moments))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Elementwise product with constants.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::invalid("mul_const: length mismatch"));
        }
        let t = self.value(x);
        let data = t.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    /// Elementwise sum with constants.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::invalid("add_const: length mismatch"));
        }
        let t = self.value(x);
        let data = t.data().iter().zip(c).map(|(a, b)| a + b).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AddConst(x), rg))
    }

    /// Max pooling; padded positions never win.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("max_pool: expected NCHW input"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = window_out(h, kernel, stride, pad)?;
        let wo = window_out(w, kernel, stride, pad)?;
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * c * ho * wo];
        let mut argmax = vec![usize::MAX; out.len()];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let oi = (p * ho + oy) * wo + ox;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ii = (p * h + iy as usize) * w + ix as usize;
                            if xd[ii] > out[oi] {
                                out[oi] = xd[ii];
                                argmax[oi] = ii;
                            }
                        }
                    }
                    if argmax[oi] == usize::MAX {
                        out[oi] = 0.0;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    /// Average pooling over valid (non-padded) positions.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("avg_pool: expected NCHW input"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = window_out(h, kernel, stride, pad)?;
        let wo = window_out(w, kernel, stride, pad)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                let (ylo, yhi) = pool_span(oy, kernel, stride, pad, h);
                for ox in 0..wo {
                    let (xlo, xhi) = pool_span(ox, kernel, stride, pad, w);
                    let mut acc = 0.0;
                    for iy in ylo..yhi {
                        for ix in xlo..xhi {
                            acc += xd[(p * h + iy) * w + ix];
                        }
                    }
                    let count = ((yhi - ylo) * (xhi - xlo)).max(1);
                    out[(p * ho + oy) * wo + ox] = acc / count as f64;
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AvgPool { x, kernel, stride, pad }, rg))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("global_avg_pool: needs a channel axis"));
        }
        let (n, c, inner) = axis1(&s);
        let xd = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xd[p * inner..(p + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// `x [N, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let n = xs[0];
        let fin = self.value(x).len() / n;
        if ws.len() != 2 || ws[1] != fin {
            return Err(Error::invalid(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let fout = ws[0];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            let row = &xd[i * fin..(i + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                let dot: f64 = row.iter().zip(wr).map(|(a, b)| a * b).sum();
                out[i * fout + o] = dot + bias.map_or(0.0, |b| b[o]);
            }
        }
        let t = Tensor::new(vec![n, fout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let s0 = self.value(*first).shape().to_vec();
        let (n, _, inner) = axis1(&s0);
        let mut total_c = 0;
        for v in xs {
            let s = self.value(*v).shape();
            let (vn, vc, vi) = axis1(s);
            if vn != n || vi != inner || s.len() != s0.len() {
                return Err(Error::invalid("concat: inputs disagree outside axis 1"));
            }
            total_c += vc;
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for ni in 0..n {
            for v in xs {
                let (_, vc, _) = axis1(self.value(*v).shape());
                let d = self.value(*v).data();
                out.extend_from_slice(&d[ni * vc * inner..(ni + 1) * vc * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = total_c;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    fn softmax_values(&self, x: Var, log: bool) -> Result<Tensor> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("softmax: needs an axis 1"));
        }
        let (n, c, inner) = axis1(&s);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for i in 0..inner {
                let idx = |ci: usize| (ni * c + ci) * inner + i;
                let max = (0..c).map(|ci| xd[idx(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ci| (xd[idx(ci)] - max).exp()).sum();
                let lz = z.ln();
                for ci in 0..c {
                    let l = xd[idx(ci)] - max - lz;
                    out[idx(ci)] = if log { l } else { l.exp() };
                }
            }
        }
        Tensor::new(s, out)
    }

    /// Softmax over axis 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.softmax_values(x, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Log-softmax over axis 1.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.softmax_values(x, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Elementwise smooth-L1 (Huber with unit threshold).
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.map(x, Op::SmoothL1(x), smooth_l1)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn dot_const(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::invalid("dot_const: length mismatch"));
        }
        let s = self.value(x).data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(x, w), rg))
    }

    /// Sum over axis 1: `[N, C, rest..] -> [N, rest..]`.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("sum_axis1: needs an axis 1"));
        }
        let (n, c, inner) = axis1(&s);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * inner];
        for ni in 0..n {
            for ci in 0..c {
                let src = &xd[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                for (o, v) in out[ni * inner..(ni + 1) * inner].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&s[2..]);
        if shape.len() == 1 {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumAxis1(x), rg))
    }

    /// Each row (axis 0 slice) divided by `‖row‖₂ + eps`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let rows = t.shape()[0];
        let d = t.len() / rows;
        let mut out = t.data().to_vec();
        for r in out.chunks_mut(d) {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm + eps);
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::RowNormalize { x, eps }, rg)
    }

    /// L2 norm of each row: `[R, ..] -> [R]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let rows = t.shape()[0];
        let d = t.len() / rows;
        let out = t
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::new(vec![rows], out).expect("rows");
        let rg = self.rg(&[x]);
        self.push(t, Op::RowNorm(x), rg)
    }

    /// Builds a tensor of `shape` whose element `i` is `xs[index[i].0][index[i].1]`.
    pub fn gather(&mut self, xs: &[Var], index: Vec<(usize, usize)>, shape: Vec<usize>) -> Result<Var> {
        let mut out = Vec::with_capacity(index.len());
        for &(src, off) in &index {
            let v = xs
                .get(src)
                .ok_or_else(|| Error::invalid(format!("gather: no source #{src}")))?;
            let d = self.value(*v).data();
            out.push(
                *d.get(off)
                    .ok_or_else(|| Error::invalid(format!("gather: offset {off} out of range")))?,
            );
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::Gather { xs: xs.to_vec(), index }, rg))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let p = self.softmax_values(logits, false)?.into_data();
        let lp = self.softmax_values(logits, true)?.into_data();
        let loss = -(0..n).map(|i| lp[i * c + labels[i]]).sum::<f64>() / n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: p,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward: loss must be a single value"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) | Op::AddConst(x) => acc(*x, &|b| add_into(b, g)),
            Op::Add(a, b2) => {
                acc(*a, &|b| add_into(b, g));
                acc(*b2, &|b| add_into(b, g));
            }
            Op::Sub(a, b2) => {
                acc(*a, &|b| add_into(b, g));
                acc(*b2, &|b| b.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b2) => {
                let av = self.value(*a).data();
                let bv = self.value(*b2).data();
                acc(*a, &|b| b.iter_mut().zip(g).zip(bv).for_each(|((o, d), y)| *o += d * y));
                acc(*b2, &|b| {
                    b.iter_mut().zip(g).zip(av).for_each(|((o, d), x)| *o += d * x)
                });
            }
            Op::Scale(x, c) => acc(*x, &|b| b.iter_mut().zip(g).for_each(|(o, d)| *o += d * c)),
            Op::MulConst(x, c) => acc(*x, &|b| b.iter_mut().zip(g).zip(c).for_each(|((o, d), k)| *o += d * k)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|b| {
                    for ((o, d), v) in b.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, g, &mut acc),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = axis1(self.value(*x).shape());
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for i in base..base + inner {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                            let dxh = g[i] * gm[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * xhat[i];
                        }
                    }
                }
                let m = (n * inner) as f64;
                acc(*x, &|b| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            for i in base..base + inner {
                                let dxh = g[i] * gm[ci];
                                b[i] += if *batch_stats {
                                    inv_std[ci] / m * (m * dxh - sum_dxhat[ci] - xhat[i] * sum_dxhat_xhat[ci])
                                } else {
                                    dxh * inv_std[ci]
                                };
                            }
                        }
                    }
                });
                acc(*gamma, &|b| add_into(b, &dgamma));
                acc(*beta, &|b| add_into(b, &dbeta));
            }
            Op::MaxPool { x, argmax } => acc(*x, &|b| {
                for (d, &src) in g.iter().zip(argmax) {
                    if src != usize::MAX {
                        b[src] += d;
                    }
                }
            }),
            Op::AvgPool { x, kernel, stride, pad } => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                acc(*x, &|b| {
                    for p in 0..n * c {
                        for oy in 0..ho {
                            let (ylo, yhi) = pool_span(oy, *kernel, *stride, *pad, h);
                            for ox in 0..wo {
                                let (xlo, xhi) = pool_span(ox, *kernel, *stride, *pad, w);
                                let count = ((yhi - ylo) * (xhi - xlo)).max(1) as f64;
                                let d = g[(p * ho + oy) * wo + ox] / count;
                                for iy in ylo..yhi {
                                    for ix in xlo..xhi {
                                        b[(p * h + iy) * w + ix] += d;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, inner) = axis1(self.value(*x).shape());
                acc(*x, &|b| {
                    for p in 0..n * c {
                        let d = g[p] / inner as f64;
                        b[p * inner..(p + 1) * inner].iter_mut().for_each(|o| *o += d);
                    }
                });
            }
            Op::Linear { x, w, b: bias } => {
                let n = self.value(*x).shape()[0];
                let fin = self.value(*x).len() / n;
                let fout = self.value(*w).shape()[0];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                acc(*x, &|b| {
                    for i in 0..n {
                        for o in 0..fout {
                            let d = g[i * fout + o];
                            for k in 0..fin {
                                b[i * fin + k] += d * wd[o * fin + k];
                            }
                        }
                    }
                });
                acc(*w, &|b| {
                    for i in 0..n {
                        for o in 0..fout {
                            let d = g[i * fout + o];
                            for k in 0..fin {
                                b[o * fin + k] += d * xd[i * fin + k];
                            }
                        }
                    }
                });
                if let Some(bv) = bias {
                    acc(*bv, &|b| {
                        for i in 0..n {
                            for o in 0..fout {
                                b[o] += g[i * fout + o];
                            }
                        }
                    });
                }
            }
            Op::Concat(xs) => {
                let (n, total_c, inner) = axis1(node.value.shape());
                let mut offset = 0;
                for v in xs {
                    let (_, vc, _) = axis1(self.value(*v).shape());
                    acc(*v, &|b| {
                        for ni in 0..n {
                            let src = &g[(ni * total_c + offset) * inner..(ni * total_c + offset + vc) * inner];
                            add_into(&mut b[ni * vc * inner..(ni + 1) * vc * inner], src);
                        }
                    });
                    offset += vc;
                }
            }
            Op::Softmax(x) => {
                let (n, c, inner) = axis1(node.value.shape());
                let y = node.value.data();
                acc(*x, &|b| {
                    for ni in 0..n {
                        for i in 0..inner {
                            let idx = |ci: usize| (ni * c + ci) * inner + i;
                            let dot: f64 = (0..c).map(|ci| g[idx(ci)] * y[idx(ci)]).sum();
                            for ci in 0..c {
                                b[idx(ci)] += y[idx(ci)] * (g[idx(ci)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (n, c, inner) = axis1(node.value.shape());
                let ly = node.value.data();
                acc(*x, &|b| {
                    for ni in 0..n {
                        for i in 0..inner {
                            let idx = |ci: usize| (ni * c + ci) * inner + i;
                            let gs: f64 = (0..c).map(|ci| g[idx(ci)]).sum();
                            for ci in 0..c {
                                b[idx(ci)] += g[idx(ci)] - ly[idx(ci)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|b| b.iter_mut().zip(g).zip(xv).for_each(|((o, d), v)| *o += d / v));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|b| {
                    b.iter_mut().zip(g).zip(xv).for_each(|((o, d), v)| *o += d * sign(*v))
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|b| {
                    b.iter_mut().zip(g).zip(xv).for_each(|((o, d), v)| *o += 2.0 * d * v)
                });
            }
            Op::SmoothL1(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|b| {
                    for ((o, d), v) in b.iter_mut().zip(g).zip(xv) {
                        *o += d * if v.abs() < 1.0 { *v } else { sign(*v) };
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|b| b.iter_mut().for_each(|o| *o += g[0])),
            Op::DotConst(x, w) => acc(*x, &|b| b.iter_mut().zip(w).for_each(|(o, k)| *o += g[0] * k)),
            Op::SumAxis1(x) => {
                let (n, c, inner) = axis1(self.value(*x).shape());
                acc(*x, &|b| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let dst = &mut b[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                            add_into(dst, &g[ni * inner..(ni + 1) * inner]);
                        }
                    }
                });
            }
            Op::RowNormalize { x, eps } => {
                let xv = self.value(*x).data();
                let rows = self.value(*x).shape()[0];
                let d = xv.len() / rows;
                acc(*x, &|b| {
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let den = norm + eps;
                        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            let mut v = gr[j] / den;
                            if norm > 0.0 {
                                v -= xr[j] * xg / (norm * den * den);
                            }
                            b[r * d + j] += v;
                        }
                    }
                });
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x).data();
                let rows = self.value(*x).shape()[0];
                let d = xv.len() / rows;
                let norms = node.value.data();
                acc(*x, &|b| {
                    for r in 0..rows {
                        if norms[r] > 0.0 {
                            for j in 0..d {
                                b[r * d + j] += g[r] * xv[r * d + j] / norms[r];
                            }
                        }
                    }
                });
            }
            Op::Gather { xs, index } => {
                for (k, v) in xs.iter().enumerate() {
                    acc(*v, &|b| {
                        for (d, &(src, off)) in g.iter().zip(index) {
                            if src == k {
                                b[off] += d;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                acc(*logits, &|b| {
                    for i in 0..n {
                        for ci in 0..c {
                            let onehot = if ci == labels[i] { 1.0 } else { 0.0 };
                            b[i * c + ci] += g[0] * (probs[i * c + ci] - onehot) / n as f64;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[f64],
        acc: &mut impl FnMut(Var, &dyn Fn(&mut [f64])),
    ) {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let plane = ho * wo;
        if let Some(bv) = b {
            acc(bv, &|buf| {
                for ni in 0..n {
                    for oc in 0..cout {
                        buf[oc] += g[(ni * cout + oc) * plane..(ni * cout + oc + 1) * plane]
                            .iter()
                            .sum::<f64>();
                    }
                }
            });
        }
        acc(w, &|buf| {
            for ni in 0..n {
                for oc in 0..cout {
                    let go = &g[(ni * cout + oc) * plane..(ni * cout + oc + 1) * plane];
                    for ic in 0..cin {
                        let src = &xin[(ni * cin + ic) * h * wd..(ni * cin + ic + 1) * h * wd];
                        for ky in 0..k {
                            let (ylo, yhi) = valid_range(ho, h, ky, stride, pad);
                            for kx in 0..k {
                                let (xlo, xhi) = valid_range(wo, wd, kx, stride, pad);
                                let mut s = 0.0;
                                for oy in ylo..yhi {
                                    let iy = oy * stride + ky - pad;
                                    let srow = &src[iy * wd..(iy + 1) * wd];
                                    let grow = &go[oy * wo..(oy + 1) * wo];
                                    if stride == 1 {
                                        let off = xlo + kx - pad;
                                        s += grow[xlo..xhi].iter().zip(&srow[off..]).map(|(a, b)| a * b).sum::<f64>();
                                    } else {
                                        for ox in xlo..xhi {
                                            s += grow[ox] * srow[ox * stride + kx - pad];
                                        }
                                    }
                                }
                                buf[((oc * cin + ic) * k + ky) * k + kx] += s;
                            }
                        }
                    }
                }
            }
        });
        acc(x, &|buf| {
            for ni in 0..n {
                for oc in 0..cout {
                    let go = &g[(ni * cout + oc) * plane..(ni * cout + oc + 1) * plane];
                    for ic in 0..cin {
                        let dst = &mut buf[(ni * cin + ic) * h * wd..(ni * cin + ic + 1) * h * wd];
                        for ky in 0..k {
                            let (ylo, yhi) = valid_range(ho, h, ky, stride, pad);
                            for kx in 0..k {
                                let (xlo, xhi) = valid_range(wo, wd, kx, stride, pad);
                                let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                                for oy in ylo..yhi {
                                    let iy = oy * stride + ky - pad;
                                    let drow = &mut dst[iy * wd..(iy + 1) * wd];
                                    let grow = &go[oy * wo..(oy + 1) * wo];
                                    if stride == 1 {
                                        let off = xlo + kx - pad;
                                        for (dv, gv) in drow[off..].iter_mut().zip(&grow[xlo..xhi]) {
                                            *dv += wv * gv;
                                        }
                                    } else {
                                        for ox in xlo..xhi {
                                            drow[ox * stride + kx - pad] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Subgradient sign with sign(0) = 0.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn smooth_l1(v: f64) -> f64 {
    let a = v.abs();
    if a < 1.0 {
        0.5 * v * v
    } else {
        a - 0.5
    }
}

/// Input index span covered by pooling window `o` (padding excluded).
fn pool_span(o: usize, kernel: usize, stride: usize, pad: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize).max(0) as usize).min(len);
    (lo.min(hi), hi)
}
