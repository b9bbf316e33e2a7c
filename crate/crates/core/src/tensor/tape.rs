use super::kernels::{self, View, ViewMut, WindowGeom};
use super::Tensor;
use crate::error::{MomeError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Sum(Var),
    Index(Var, usize),
    Reshape(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Act(Var, Activation),
    Conv3d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: WindowGeom,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        b: Var,
        rows_per_group: usize,
    },
    SoftmaxNll {
        logits: Var,
        label: usize,
        weight: f64,
        probs: Vec<f64>,
        clamped: bool,
    },
}

/// Records primitive applications in execution order; `backward` replays
/// them in reverse, so node ids are already topologically sorted.
///
/// A tape is single-threaded. Values are plain [`Tensor`]s and can be cloned
/// out freely.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = inputs.iter().all(|v| self.values[v.0].is_finite());
            debug_assert!(!inputs_finite || value.is_finite(), "non-finite output from {op:?}");
        }
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Register an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.values[v.0].shape.clone(),
            data: g.clone(),
        })
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(MomeError::shape(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MomeError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(MomeError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            View::row_major(self.values[a.0].data(), k),
            View::row_major(self.values[b.0].data(), n),
            0.0,
            ViewMut::row_major(&mut out, n),
        );
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        Ok(Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x[..., n] + b[n]` broadcast over all leading axes.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.values[b.0].numel() != n {
            return Err(MomeError::shape("add_row_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.values[b.0].data();
        let mut out = self.values[x.0].clone();
        for row in out.data.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, b), &[x, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Scalar element at flat index `i`.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = *self.values[x.0]
            .data
            .get(i)
            .ok_or_else(|| MomeError::invalid(format!("index {i} out of range")))?;
        Ok(self.push(Tensor::scalar(v), Op::Index(x, i), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.values[x.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(x),
            &[x],
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(MomeError::invalid(format!(
                "slice_rows {start}..{} of {r} rows",
                start + len
            )));
        }
        let data = self.values[x.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(
            Tensor {
                shape: vec![len, c],
                data,
            },
            Op::SliceRows(x, start),
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MomeError::invalid("concat_rows of nothing"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2(p, "concat_rows")?;
            if c2 != c {
                return Err(MomeError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.values[p.0].data());
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, c],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.shape(x).to_vec();
        if axis >= dims.len() {
            return Err(MomeError::invalid(format!(
                "softmax axis {axis} on rank-{} tensor",
                dims.len()
            )));
        }
        let out = kernels::softmax_axis(self.values[x.0].data(), &dims, axis);
        Ok(self.push(Tensor { shape: dims, data: out }, Op::Softmax(x, axis), &[x]))
    }

    /// Normalize over the last axis, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.values[gamma.0].numel() != n || self.values[beta.0].numel() != n {
            return Err(MomeError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let rows = xs.len() / n;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-channel normalization over all leading (spatial) axes of a
    /// channels-last tensor. No affine transform.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(MomeError::invalid("instance_norm needs [spatial.., channels]"));
        }
        let c = shape[shape.len() - 1];
        let xs = self.values[x.0].data();
        let v = xs.len() / c;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for p in 0..v {
            for ch in 0..c {
                mean[ch] += xs[p * c + ch];
            }
        }
        for m in &mut mean {
            *m /= v as f64;
        }
        for p in 0..v {
            for ch in 0..c {
                let d = xs[p * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|s| 1.0 / (s / v as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        for p in 0..v {
            for ch in 0..c {
                xhat[p * c + ch] = (xs[p * c + ch] - mean[ch]) * rstd[ch];
            }
        }
        let out = Tensor {
            shape,
            data: xhat.clone(),
        };
        Ok(self.push(out, Op::InstanceNorm { x, xhat, rstd }, &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Gelu => self.values[x.0].map(kernels::gelu),
            Activation::Relu => self.values[x.0].map(|v| v.max(0.0)),
        };
        self.push(out, Op::Act(x, kind), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// 3D cross-correlation of a `[D, H, W, Cin]` volume with a
    /// `[kd, kh, kw, Cin, Cout]` kernel, zero "same-ceil" padding so each
    /// output axis is `ceil(in / stride)`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(MomeError::invalid("conv3d stride must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 5 || xs[3] != ks[3] {
            return Err(MomeError::shape("conv3d", &xs, &ks));
        }
        let cin = xs[3];
        let cout = ks[4];
        if self.values[bias.0].numel() != cout {
            return Err(MomeError::shape("conv3d bias", &ks, self.shape(bias)));
        }
        let geom = WindowGeom::new([xs[0], xs[1], xs[2]], [ks[0], ks[1], ks[2]], stride);
        for a in 0..3 {
            let padded = (geom.out_dims[a] - 1) * stride + geom.window[a];
            if geom.window[a] > padded.max(geom.in_dims[a]) {
                return Err(MomeError::shape("conv3d window", &xs, &ks));
            }
        }
        let patches = kernels::im2col(self.values[x.0].data(), &geom, cin);
        let positions = geom.out_positions();
        let kdim = geom.window_len() * cin;
        let mut out = vec![0.0; positions * cout];
        let bias_v = self.values[bias.0].data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias_v);
        }
        kernels::gemm(
            positions,
            kdim,
            cout,
            1.0,
            View::row_major(&patches, kdim),
            View::row_major(self.values[kernel.0].data(), cout),
            1.0,
            ViewMut::row_major(&mut out, cout),
        );
        let [od, oh, ow] = geom.out_dims;
        Ok(self.push(
            Tensor {
                shape: vec![od, oh, ow, cout],
                data: out,
            },
            Op::Conv3d { x, kernel, bias, geom },
            &[x, kernel, bias],
        ))
    }

    /// Max pooling over cubic windows of a channels-last volume; windows are
    /// clipped at the border and output axes are `ceil(in / stride)`.
    pub fn maxpool3d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(MomeError::invalid("maxpool window and stride must be positive"));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(MomeError::shape("maxpool3d", &xs, &[0, 0, 0, 0]));
        }
        let geom = WindowGeom::new([xs[0], xs[1], xs[2]], [window; 3], stride);
        let (vals, argmax) = kernels::maxpool(self.values[x.0].data(), &geom, xs[3]);
        let [od, oh, ow] = geom.out_dims;
        Ok(self.push(
            Tensor {
                shape: vec![od, oh, ow, xs[3]],
                data: vals,
            },
            Op::MaxPool3d { x, argmax },
            &[x],
        ))
    }

    /// Scaled dot-product attention over projected `q, k, v: [m × d]`, split
    /// into `heads` contiguous column blocks; returns the concatenated head
    /// outputs `[m × d]` (before any output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (m, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(MomeError::config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.values[q.0].data();
        let kd = self.values[k.0].data();
        let vd = self.values[v.0].data();
        let mut probs = vec![0.0; heads * m * m];
        let mut out = vec![0.0; m * d];
        for h in 0..heads {
            let p = &mut probs[h * m * m..(h + 1) * m * m];
            kernels::gemm(
                m,
                dh,
                m,
                scale,
                View {
                    data: qd,
                    offset: h * dh,
                    rs: d,
                    cs: 1,
                },
                View {
                    data: kd,
                    offset: h * dh,
                    rs: 1,
                    cs: d,
                },
                0.0,
                ViewMut::row_major(p, m),
            );
            let sm = kernels::softmax_axis(p, &[m, m], 1);
            p.copy_from_slice(&sm);
            kernels::gemm(
                m,
                m,
                dh,
                1.0,
                View::row_major(p, m),
                View {
                    data: vd,
                    offset: h * dh,
                    rs: d,
                    cs: 1,
                },
                0.0,
                ViewMut {
                    data: &mut out,
                    offset: h * dh,
                    rs: d,
                    cs: 1,
                },
            );
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, d],
                data: out,
            },
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        ))
    }

    /// Attention probabilities of the most recent attention node `out`
    /// (`heads × m × m`, rows sum to one).
    pub fn attention_probs(&self, out: Var) -> Option<&[f64]> {
        match &self.ops[out.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row `j` of `x: [G·p × din]` is mapped by group `j / p`:
    /// `x_j · w[g] + b[g]` with `w: [G × din × dout]`, `b: [G × dout]`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Var, rows_per_group: usize) -> Result<Var> {
        let (rows, din) = self.dims2(x, "grouped_linear")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != din || rows_per_group == 0 || ws[0] * rows_per_group != rows {
            return Err(MomeError::shape("grouped_linear", self.shape(x), &ws));
        }
        let (groups, dout) = (ws[0], ws[2]);
        if self.values[b.0].numel() != groups * dout {
            return Err(MomeError::shape("grouped_linear bias", &ws, self.shape(b)));
        }
        let xd = self.values[x.0].data();
        let wd = self.values[w.0].data();
        let bd = self.values[b.0].data();
        let mut out = vec![0.0; rows * dout];
        for g in 0..groups {
            let r0 = g * rows_per_group;
            for r in r0..r0 + rows_per_group {
                out[r * dout..(r + 1) * dout].copy_from_slice(&bd[g * dout..(g + 1) * dout]);
            }
            kernels::gemm(
                rows_per_group,
                din,
                dout,
                1.0,
                View {
                    data: xd,
                    offset: r0 * din,
                    rs: din,
                    cs: 1,
                },
                View {
                    data: wd,
                    offset: g * din * dout,
                    rs: dout,
                    cs: 1,
                },
                1.0,
                ViewMut {
                    data: &mut out,
                    offset: r0 * dout,
                    rs: dout,
                    cs: 1,
                },
            );
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, dout],
                data: out,
            },
            Op::GroupedLinear {
                x,
                w,
                b,
                rows_per_group,
            },
            &[x, w, b],
        ))
    }

    /// `−weight · ln(max(softmax(logits)[label], 1e−12))` as a scalar.
    pub fn softmax_nll(&mut self, logits: Var, label: usize, weight: f64) -> Result<Var> {
        let n = self.values[logits.0].numel();
        if label >= n {
            return Err(MomeError::invalid(format!("label {label} with {n} classes")));
        }
        let probs = kernels::softmax_axis(self.values[logits.0].data(), &[n], 0);
        let p = probs[label];
        let clamped = p < 1e-12;
        let loss = if p.is_nan() {
            f64::NAN
        } else {
            -weight * p.max(1e-12).ln()
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxNll {
                logits,
                label,
                weight,
                probs,
                clamped,
            },
            &[logits],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into every
    /// node that (transitively) depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(MomeError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += 1.0,
            slot => *slot = Some(vec![1.0]),
        }
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let Tape {
            values,
            ops,
            requires,
            grads,
        } = self;
        macro_rules! sink {
            ($v:expr) => {{
                let v: Var = $v;
                if requires[v.0] {
                    let n = values[v.0].numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        let vals: &Vec<Tensor> = values;
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (vals[a.0].shape[0], vals[a.0].shape[1]);
                let n = vals[b.0].shape[1];
                if let Some(ga) = sink!(*a) {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::row_major(g, n),
                        View::transposed(vals[b.0].data(), n),
                        1.0,
                        ViewMut::row_major(ga, k),
                    );
                }
                if let Some(gb) = sink!(*b) {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::transposed(vals[a.0].data(), k),
                        View::row_major(g, n),
                        1.0,
                        ViewMut::row_major(gb, n),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = sink!(v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = sink!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = sink!(*b) {
                    for (o, d) in gb.iter_mut().zip(g) {
                        *o -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (vals[a.0].data(), vals[b.0].data());
                if let Some(ga) = sink!(*a) {
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(va) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = sink!(*a) {
                    for (o, d) in ga.iter_mut().zip(g) {
                        *o += d * c;
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(gx) = sink!(*x) {
                    add_into(gx, g);
                }
                let n = vals[b.0].numel();
                if let Some(gb) = sink!(*b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = sink!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Index(x, idx) => {
                if let Some(gx) = sink!(*x) {
                    gx[*idx] += g[0];
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = sink!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (vals[x.0].shape[0], vals[x.0].shape[1]);
                if let Some(gx) = sink!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let c = vals[x.0].shape[1];
                if let Some(gx) = sink!(*x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = vals[p.0].numel();
                    if let Some(gp) = sink!(*p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Softmax(x, axis) => {
                let y = vals[i].data();
                let (outer, len, inner) = kernels::axis_split(&vals[i].shape, *axis);
                if let Some(gx) = sink!(*x) {
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + q;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = vals[gamma.0].numel();
                let gam = vals[gamma.0].data();
                if let Some(gg) = sink!(*gamma) {
                    for (r, row) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] += row[j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = sink!(*beta) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = sink!(*x) {
                    let nf = n as f64;
                    for (r, row) in g.chunks(n).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = row[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..n {
                            let dxh = row[j] * gam[j];
                            gx[r * n + j] += rstd[r] / nf * (nf * dxh - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::InstanceNorm { x, xhat, rstd } => {
                let c = rstd.len();
                let v = g.len() / c;
                if let Some(gx) = sink!(*x) {
                    let vf = v as f64;
                    let mut s1 = vec![0.0; c];
                    let mut s2 = vec![0.0; c];
                    for p in 0..v {
                        for ch in 0..c {
                            s1[ch] += g[p * c + ch];
                            s2[ch] += g[p * c + ch] * xhat[p * c + ch];
                        }
                    }
                    for p in 0..v {
                        for ch in 0..c {
                            let k = p * c + ch;
                            gx[k] += rstd[ch] / vf * (vf * g[k] - s1[ch] - xhat[k] * s2[ch]);
                        }
                    }
                }
            }
            Op::Act(x, kind) => {
                let xv = vals[x.0].data();
                if let Some(gx) = sink!(*x) {
                    match kind {
                        Activation::Relu => {
                            for ((o, d), v) in gx.iter_mut().zip(g).zip(xv) {
                                if *v > 0.0 {
                                    *o += d;
                                }
                            }
                        }
                        Activation::Gelu => {
                            for ((o, d), v) in gx.iter_mut().zip(g).zip(xv) {
                                *o += d * kernels::gelu_grad(*v);
                            }
                        }
                    }
                }
            }
            Op::Conv3d { x, kernel, bias, geom } => {
                let cin = vals[x.0].shape[3];
                let cout = vals[kernel.0].shape[4];
                let positions = geom.out_positions();
                let kdim = geom.window_len() * cin;
                if let Some(gb) = sink!(*bias) {
                    for row in g.chunks(cout) {
                        add_into(gb, row);
                    }
                }
                if requires[kernel.0] {
                    let patches = kernels::im2col(vals[x.0].data(), geom, cin);
                    let gk = sink!(*kernel).expect("kernel requires grad");
                    kernels::gemm(
                        kdim,
                        positions,
                        cout,
                        1.0,
                        View::transposed(&patches, kdim),
                        View::row_major(g, cout),
                        1.0,
                        ViewMut::row_major(gk, cout),
                    );
                }
                if let Some(gx) = sink!(*x) {
                    let mut dpatch = vec![0.0; positions * kdim];
                    kernels::gemm(
                        positions,
                        cout,
                        kdim,
                        1.0,
                        View::row_major(g, cout),
                        View::transposed(vals[kernel.0].data(), cout),
                        0.0,
                        ViewMut::row_major(&mut dpatch, kdim),
                    );
                    kernels::col2im_add(&dpatch, geom, cin, gx);
                }
            }
            Op::MaxPool3d { x, argmax } => {
                if let Some(gx) = sink!(*x) {
                    for (d, &a) in g.iter().zip(argmax) {
                        gx[a] += d;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (m, d) = (vals[q.0].shape[0], vals[q.0].shape[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (vals[q.0].data(), vals[k.0].data(), vals[v.0].data());
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                let mut ds = vec![0.0; m * m];
                for h in 0..*heads {
                    let p = &probs[h * m * m..(h + 1) * m * m];
                    let go = View {
                        data: g,
                        offset: h * dh,
                        rs: d,
                        cs: 1,
                    };
                    // dV_h = Pᵀ dO_h
                    kernels::gemm(
                        m,
                        m,
                        dh,
                        1.0,
                        View::transposed(p, m),
                        go,
                        0.0,
                        ViewMut {
                            data: &mut dv,
                            offset: h * dh,
                            rs: d,
                            cs: 1,
                        },
                    );
                    // dP = dO_h V_hᵀ
                    kernels::gemm(
                        m,
                        dh,
                        m,
                        1.0,
                        go,
                        View {
                            data: vd,
                            offset: h * dh,
                            rs: 1,
                            cs: d,
                        },
                        0.0,
                        ViewMut::row_major(&mut ds, m),
                    );
                    for r in 0..m {
                        let row = &mut ds[r * m..(r + 1) * m];
                        let pr = &p[r * m..(r + 1) * m];
                        let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, y) in row.iter_mut().zip(pr) {
                            *x = y * (*x - dot);
                        }
                    }
                    kernels::gemm(
                        m,
                        m,
                        dh,
                        scale,
                        View::row_major(&ds, m),
                        View {
                            data: kd,
                            offset: h * dh,
                            rs: d,
                            cs: 1,
                        },
                        0.0,
                        ViewMut {
                            data: &mut dq,
                            offset: h * dh,
                            rs: d,
                            cs: 1,
                        },
                    );
                    kernels::gemm(
                        m,
                        m,
                        dh,
                        scale,
                        View::transposed(&ds, m),
                        View {
                            data: qd,
                            offset: h * dh,
                            rs: d,
                            cs: 1,
                        },
                        0.0,
                        ViewMut {
                            data: &mut dk,
                            offset: h * dh,
                            rs: d,
                            cs: 1,
                        },
                    );
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gv) = sink!(var) {
                        add_into(gv, &buf);
                    }
                }
            }
            Op::GroupedLinear {
                x,
                w,
                b,
                rows_per_group,
            } => {
                let (rows, din) = (vals[x.0].shape[0], vals[x.0].shape[1]);
                let groups = vals[w.0].shape[0];
                let dout = vals[w.0].shape[2];
                let p = *rows_per_group;
                let xd = vals[x.0].data();
                let wd = vals[w.0].data();
                if let Some(gb) = sink!(*b) {
                    for r in 0..rows {
                        let grp = r / p;
                        add_into(&mut gb[grp * dout..(grp + 1) * dout], &g[r * dout..(r + 1) * dout]);
                    }
                }
                if let Some(gw) = sink!(*w) {
                    for grp in 0..groups {
                        kernels::gemm(
                            din,
                            p,
                            dout,
                            1.0,
                            View {
                                data: xd,
                                offset: grp * p * din,
                                rs: 1,
                                cs: din,
                            },
                            View {
                                data: g,
                                offset: grp * p * dout,
                                rs: dout,
                                cs: 1,
                            },
                            1.0,
                            ViewMut {
                                data: gw,
                                offset: grp * din * dout,
                                rs: dout,
                                cs: 1,
                            },
                        );
                    }
                }
                if let Some(gx) = sink!(*x) {
                    for grp in 0..groups {
                        kernels::gemm(
                            p,
                            dout,
                            din,
                            1.0,
                            View {
                                data: g,
                                offset: grp * p * dout,
                                rs: dout,
                                cs: 1,
                            },
                            View {
                                data: wd,
                                offset: grp * din * dout,
                                rs: 1,
                                cs: dout,
                            },
                            1.0,
                            ViewMut {
                                data: gx,
                                offset: grp * p * din,
                                rs: din,
                                cs: 1,
                            },
                        );
                    }
                }
            }
            Op::SoftmaxNll {
                logits,
                label,
                weight,
                probs,
                clamped,
            } => {
                if !clamped {
                    if let Some(gl) = sink!(*logits) {
                        for (j, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *label { 1.0 } else { 0.0 };
                            *o += g[0] * weight * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}
