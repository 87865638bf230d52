//! Define-by-run computation graph.
//!
//! Every op evaluates eagerly and records a node; [`Tape::backward`] walks
//! the nodes in reverse. Shape errors in op arguments are programming
//! errors and panic. Non-finite values poison the tape and surface as
//! [`AutodiffError::NaNDetected`] from `backward`.

use crate::gemm::gemm;
use crate::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2d(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows(Var),
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    MseLoss(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d(..) => "max_pool",
            Op::MeanAxis { .. } => "mean",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean_all",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::LstmCell { .. } => "lstm_cell",
            Op::Attention { .. } => "attention",
            Op::MseLoss(..) => "mse_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b)
            | Op::MseLoss(a, b) => vec![*a, *b],
            Op::Affine(a, b, c) => vec![*a, *b, *c],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::MaxPool2d(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Reshape(a)
            | Op::GatherRows(a) => vec![*a],
            Op::MeanAxis { x, .. } | Op::Narrow { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
            } => vec![*x, *h, *c, *w_ih, *w_hh, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    aux: Vec<f64>,
    aux_idx: Vec<usize>,
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                let param = store.get_mut(id);
                for (acc, v) in param.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel larger than padded input");
    (size + 2 * pad - k) / stride + 1
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

    /// Name of the first op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poisoned
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape")
    }

    fn push_full(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        aux: Vec<f64>,
        aux_idx: Vec<usize>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        if self.poisoned.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.poisoned = Some(op.name());
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
            aux,
            aux_idx,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        self.push_full(shape, value, op, Vec::new(), Vec::new())
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        if self.poisoned.is_none() && !t.is_finite() {
            self.poisoned = Some("leaf");
        }
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad,
            param,
            aux: Vec::new(),
            aux_idx: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false, None)
    }

    /// Differentiable input whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true, None)
    }

    /// Loads a parameter onto the tape. Frozen parameters load as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.trainable, Some(id))
    }

    fn binary_same_shape(&self, a: Var, b: Var) -> Vec<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "elementwise shape mismatch");
        sa.to_vec()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_same_shape(a, b);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(shape, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_same_shape(a, b);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(shape, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_same_shape(a, b);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(shape, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).iter().map(|x| x * c).collect();
        self.push(shape, value, Op::Scale(a, c))
    }

    /// `x[n×d] + row[d]`, broadcasting over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, d) = dims2(self.shape(x));
        assert_eq!(self.shape(row), [d], "add_row width mismatch");
        let r = self.value(row);
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::AddRow(x, row))
    }

    /// `x[n×d] ⊙ row[d]`, broadcasting over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (_, d) = dims2(self.shape(x));
        assert_eq!(self.shape(row), [d], "mul_row width mismatch");
        let r = self.value(row);
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::MulRow(x, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = dims2(self.shape(a));
        let (k2, m) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            0.0,
        );
        self.push(vec![n, m], out, Op::MatMul(a, b))
    }

    /// `x[n×in] · w[in×out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, k) = dims2(self.shape(x));
        let (k2, m) = dims2(self.shape(w));
        assert_eq!(k, k2, "affine input width mismatch");
        assert_eq!(self.shape(b), [m], "affine bias mismatch");
        let bias = self.value(b);
        let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            n,
            k,
            m,
            self.value(x),
            false,
            self.value(w),
            false,
            &mut out,
            1.0,
        );
        self.push(vec![n, m], out, Op::Affine(x, w, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(shape, value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(shape, value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(shape, value, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax of a scalar");
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(shape, value, Op::Softmax(x))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm of a scalar");
        let mut value = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(value.len() / d.max(1));
        for row in value.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        self.push_full(shape, value, Op::LayerNorm(x), inv_std, Vec::new())
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1);
        let xs = self.shape(x);
        assert_eq!(xs.len(), 3, "conv2d expects [C, H, W]");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 4, "conv2d weights must be [O, C, k, k]");
        let (o, wc, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wc, c, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        assert_eq!(self.shape(b), [o], "conv2d bias mismatch");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let cols = im2col(self.value(x), c, h, wd, k, stride, pad, ho, wo);
        let p = ho * wo;
        let bias = self.value(b);
        let mut out: Vec<f64> = bias
            .iter()
            .flat_map(|&bv| std::iter::repeat_n(bv, p))
            .collect();
        gemm(
            o,
            c * k * k,
            p,
            self.value(w),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        self.push_full(
            vec![o, ho, wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            cols,
            Vec::new(),
        )
    }

    /// Max pooling over `size × size` patches of a `[C, H, W]` input.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 3, "max_pool2d expects [C, H, W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ho = conv_out(h, size, stride, 0);
        let wo = conv_out(w, size, stride, 0);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = ch * h * w + (i * stride + di) * w + j * stride + dj;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
        self.push_full(vec![c, ho, wo], out, Op::MaxPool2d(x), Vec::new(), arg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push(new_shape, out, Op::MeanAxis { x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::MeanAll(x))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (a, b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let v = self.value(p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis(&shape, axis);
        assert!(start + len <= full, "narrow out of range");
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(new_shape, out, Op::Narrow { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape size mismatch"
        );
        let value = self.value(x).to_vec();
        self.push(shape.to_vec(), value, Op::Reshape(x))
    }

    /// Row `i` of the `[k×d]` output is row `rows[i]` of `x[n×d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (n, d) = dims2(self.shape(x));
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "gather_rows index out of range");
            out.extend_from_slice(&v[r * d..(r + 1) * d]);
        }
        self.push_full(
            vec![rows.len(), d],
            out,
            Op::GatherRows(x),
            Vec::new(),
            rows.to_vec(),
        )
    }

    /// One LSTM step over a batch.
    ///
    /// `x[B×in]`, `h[B×H]`, `c[B×H]`, `w_ih[in×4H]`, `w_hh[H×4H]`, `b[4H]`,
    /// gate column order input, forget, candidate, output:
    ///
    /// ```text
    /// i = σ(z_i)  f = σ(z_f)  g = tanh(z_g)  o = σ(z_o)
    /// c' = f⊙c + i⊙g          h' = o⊙tanh(c')
    /// ```
    ///
    /// Returns `[B×2H]` holding `h'` then `c'`; see [`Tape::lstm_split`].
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var) -> Var {
        let (batch, input) = dims2(self.shape(x));
        let (hb, hidden) = dims2(self.shape(h));
        assert_eq!(hb, batch, "lstm batch mismatch");
        assert_eq!(self.shape(c), [batch, hidden], "lstm cell state mismatch");
        assert_eq!(self.shape(w_ih), [input, 4 * hidden], "lstm w_ih mismatch");
        assert_eq!(self.shape(w_hh), [hidden, 4 * hidden], "lstm w_hh mismatch");
        assert_eq!(self.shape(b), [4 * hidden], "lstm bias mismatch");
        let bias = self.value(b);
        let mut z: Vec<f64> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            batch,
            input,
            4 * hidden,
            self.value(x),
            false,
            self.value(w_ih),
            false,
            &mut z,
            1.0,
        );
        gemm(
            batch,
            hidden,
            4 * hidden,
            self.value(h),
            false,
            self.value(w_hh),
            false,
            &mut z,
            1.0,
        );
        let cv = self.value(c);
        // aux per row: i f g o tanh(c')
        let mut aux = vec![0.0; batch * 5 * hidden];
        let mut out = vec![0.0; batch * 2 * hidden];
        for r in 0..batch {
            let zr = &z[r * 4 * hidden..(r + 1) * 4 * hidden];
            let ar = &mut aux[r * 5 * hidden..(r + 1) * 5 * hidden];
            let or = &mut out[r * 2 * hidden..(r + 1) * 2 * hidden];
            for j in 0..hidden {
                let ig = sigmoid(zr[j]);
                let fg = sigmoid(zr[hidden + j]);
                let gg = zr[2 * hidden + j].tanh();
                let og = sigmoid(zr[3 * hidden + j]);
                let c_new = fg * cv[r * hidden + j] + ig * gg;
                let tc = c_new.tanh();
                ar[j] = ig;
                ar[hidden + j] = fg;
                ar[2 * hidden + j] = gg;
                ar[3 * hidden + j] = og;
                ar[4 * hidden + j] = tc;
                or[j] = og * tc;
                or[hidden + j] = c_new;
            }
        }
        self.push_full(
            vec![batch, 2 * hidden],
            out,
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
            },
            aux,
            Vec::new(),
        )
    }

    /// Splits an [`Tape::lstm_cell`] output into `(h, c)`.
    pub fn lstm_split(&mut self, hc: Var) -> (Var, Var) {
        let (_, two_h) = dims2(self.shape(hc));
        let hidden = two_h / 2;
        let h = self.narrow(hc, 1, 0, hidden);
        let c = self.narrow(hc, 1, hidden, hidden);
        (h, c)
    }

    /// Scaled dot-product attention `softmax(QKᵀ/√d_h)·V` with the feature
    /// dimension split evenly across `heads`.
    ///
    /// `q[n×d]`, `k[m×d]`, `v[m×d_v]` → `[n×d_v]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, d) = dims2(self.shape(q));
        let (m, dk) = dims2(self.shape(k));
        let (mv, dv) = dims2(self.shape(v));
        assert_eq!(d, dk, "attention q/k width mismatch");
        assert_eq!(m, mv, "attention k/v length mismatch");
        assert!(
            heads >= 1 && d % heads == 0 && dv % heads == 0,
            "bad head split"
        );
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut weights = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * dv];
        for hd in 0..heads {
            let a = &mut weights[hd * n * m..(hd + 1) * n * m];
            for i in 0..n {
                let qi = &qv[i * d + hd * dh..i * d + (hd + 1) * dh];
                for j in 0..m {
                    let kj = &kv[j * d + hd * dh..j * d + (hd + 1) * dh];
                    a[i * m + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                softmax_in_place(&mut a[i * m..(i + 1) * m]);
                let oi = &mut out[i * dv + hd * dvh..i * dv + (hd + 1) * dvh];
                for j in 0..m {
                    let w = a[i * m + j];
                    let vj = &vv[j * dv + hd * dvh..j * dv + (hd + 1) * dvh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push_full(
            vec![n, dv],
            out,
            Op::Attention { q, k, v, heads },
            weights,
            Vec::new(),
        )
    }

    /// Attention weights recorded by an [`Tape::attention`] node,
    /// `heads × n × m`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => Some(&self.nodes[v.0].aux),
            _ => None,
        }
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Var {
        self.binary_same_shape(pred, target);
        let (a, b) = (self.value(pred), self.value(target));
        let s = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        self.push(Vec::new(), vec![s], Op::MseLoss(pred, target))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if let Some(op) = self.poisoned {
            return Err(AutodiffError::NaNDetected(op));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NaNDetected(node.op.name()));
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.filter(|_| n.requires_grad).map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Runs [`Tape::backward`] and accumulates into the store's gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), AutodiffError> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.grad_buf(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddRow(x, row) => {
                let d = self.shape(*row)[0];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gr) = self.grad_buf(grads, *row) {
                    for gs in g.chunks(d) {
                        gr.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MulRow(x, row) => {
                let d = self.shape(*row)[0];
                let (xv, rv) = (self.value(*x), self.value(*row));
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (gxs, gs) in gx.chunks_mut(d).zip(g.chunks(d)) {
                        for ((a, b), r) in gxs.iter_mut().zip(gs).zip(rv) {
                            *a += b * r;
                        }
                    }
                }
                if let Some(gr) = self.grad_buf(grads, *row) {
                    for (gs, xs) in g.chunks(d).zip(xv.chunks(d)) {
                        for ((a, b), xx) in gr.iter_mut().zip(gs).zip(xs) {
                            *a += b * xx;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(n, m, k, g, false, bv, true, ga, 1.0);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(k, n, m, av, true, g, false, gb, 1.0);
                }
            }
            Op::Affine(x, w, b) => {
                let (n, k) = dims2(self.shape(*x));
                let m = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gemm(n, m, k, g, false, wv, true, gx, 1.0);
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    gemm(k, n, m, xv, true, g, false, gw, 1.0);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for gs in g.chunks(m) {
                        gb.iter_mut().zip(gs).for_each(|(a, c)| *a += c);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((a, gy), xx) in gx.iter_mut().zip(g).zip(xv) {
                        if *xx > 0.0 {
                            *a += gy;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((a, gy), yy) in gx.iter_mut().zip(g).zip(y) {
                        *a += gy * (1.0 - yy * yy);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((a, gy), yy) in gx.iter_mut().zip(g).zip(y) {
                        *a += gy * yy * (1.0 - yy);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((gxs, gs), ys) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for ((a, gy), yy) in gxs.iter_mut().zip(gs).zip(ys) {
                            *a += yy * (gy - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(x) => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                let inv_std = &node.aux;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, ((gxs, gs), ys)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(y.chunks(d))
                        .enumerate()
                    {
                        let mean_g = gs.iter().sum::<f64>() / d as f64;
                        let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((a, gy), yy) in gxs.iter_mut().zip(gs).zip(ys) {
                            *a += inv_std[r] * (gy - mean_g - yy * mean_gy);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let p = ho * wo;
                let ckk = c * k * k;
                let cols = &node.aux;
                if let Some(gw) = self.grad_buf(grads, *w) {
                    gemm(o, p, ckk, g, false, cols, true, gw, 1.0);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (a, gs) in gb.iter_mut().zip(g.chunks(p)) {
                        *a += gs.iter().sum::<f64>();
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; ckk * p];
                    gemm(ckk, o, p, self.value(*w), true, g, false, &mut gcols, 0.0);
                    let gx = self.grad_buf(grads, *x).unwrap();
                    col2im_add(&gcols, gx, c, h, wd, k, *stride, *pad, ho, wo);
                }
            }
            Op::MaxPool2d(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (&idx, gy) in node.aux_idx.iter().zip(g) {
                        gx[idx] += gy;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let xshape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&xshape, *axis);
                let inv = 1.0 / len as f64;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xshape = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&xshape, *axis);
                let len = node.shape[*axis];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let dst = &mut gx[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::GatherRows(x) => {
                let d = node.shape[1];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (i, &r) in node.aux_idx.iter().enumerate() {
                        let dst = &mut gx[r * d..(r + 1) * d];
                        dst.iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
            } => self.backprop_lstm(node, g, grads, [*x, *h, *c, *w_ih, *w_hh, *b]),
            Op::Attention { q, k, v, heads } => {
                self.backprop_attention(node, g, grads, *q, *k, *v, *heads)
            }
            Op::MseLoss(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = 2.0 * g[0] / av.len() as f64;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += s * (x - y);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= s * (x - y);
                    }
                }
            }
        }
    }

    fn backprop_lstm(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        vars: [Var; 6],
    ) {
        let [x, h, c, w_ih, w_hh, b] = vars;
        let (batch, input) = dims2(self.shape(x));
        let hidden = self.shape(h)[1];
        let aux = &node.aux;
        let cv = self.value(c);
        let mut dz = vec![0.0; batch * 4 * hidden];
        let mut dc_prev = vec![0.0; batch * hidden];
        for r in 0..batch {
            let ar = &aux[r * 5 * hidden..(r + 1) * 5 * hidden];
            let gr = &g[r * 2 * hidden..(r + 1) * 2 * hidden];
            let dzr = &mut dz[r * 4 * hidden..(r + 1) * 4 * hidden];
            for j in 0..hidden {
                let (ig, fg, gg, og, tc) = (
                    ar[j],
                    ar[hidden + j],
                    ar[2 * hidden + j],
                    ar[3 * hidden + j],
                    ar[4 * hidden + j],
                );
                let dh = gr[j];
                let dc = gr[hidden + j] + dh * og * (1.0 - tc * tc);
                let d_o = dh * tc;
                let d_i = dc * gg;
                let d_g = dc * ig;
                let d_f = dc * cv[r * hidden + j];
                dc_prev[r * hidden + j] = dc * fg;
                dzr[j] = d_i * ig * (1.0 - ig);
                dzr[hidden + j] = d_f * fg * (1.0 - fg);
                dzr[2 * hidden + j] = d_g * (1.0 - gg * gg);
                dzr[3 * hidden + j] = d_o * og * (1.0 - og);
            }
        }
        let g4 = 4 * hidden;
        if let Some(gx) = self.grad_buf(grads, x) {
            gemm(
                batch,
                g4,
                input,
                &dz,
                false,
                self.value(w_ih),
                true,
                gx,
                1.0,
            );
        }
        if let Some(gw) = self.grad_buf(grads, w_ih) {
            gemm(input, batch, g4, self.value(x), true, &dz, false, gw, 1.0);
        }
        if let Some(gh) = self.grad_buf(grads, h) {
            gemm(
                batch,
                g4,
                hidden,
                &dz,
                false,
                self.value(w_hh),
                true,
                gh,
                1.0,
            );
        }
        if let Some(gw) = self.grad_buf(grads, w_hh) {
            gemm(hidden, batch, g4, self.value(h), true, &dz, false, gw, 1.0);
        }
        if let Some(gb) = self.grad_buf(grads, b) {
            for dzr in dz.chunks(g4) {
                gb.iter_mut().zip(dzr).for_each(|(a, d)| *a += d);
            }
        }
        if let Some(gc) = self.grad_buf(grads, c) {
            gc.iter_mut().zip(&dc_prev).for_each(|(a, d)| *a += d);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    ) {
        let (n, d) = dims2(self.shape(q));
        let m = self.shape(k)[0];
        let dv = self.shape(v)[1];
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let weights = &node.aux;
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; m * d];
        let mut gv = vec![0.0; m * dv];
        let mut ds = vec![0.0; m];
        for hd in 0..heads {
            let a = &weights[hd * n * m..(hd + 1) * n * m];
            for i in 0..n {
                let go = &g[i * dv + hd * dvh..i * dv + (hd + 1) * dvh];
                // dA_ij = go · v_j ; dV_j += A_ij go
                for j in 0..m {
                    let vj = &vv[j * dv + hd * dvh..j * dv + (hd + 1) * dvh];
                    ds[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let w = a[i * m + j];
                    let gvj = &mut gv[j * dv + hd * dvh..j * dv + (hd + 1) * dvh];
                    gvj.iter_mut().zip(go).for_each(|(t, x)| *t += w * x);
                }
                let dot: f64 = (0..m).map(|j| ds[j] * a[i * m + j]).sum();
                for j in 0..m {
                    let s = a[i * m + j] * (ds[j] - dot) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        gq[i * d + hd * dh + t] += s * kv[j * d + hd * dh + t];
                        gk[j * d + hd * dh + t] += s * qv[i * d + hd * dh + t];
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = self.grad_buf(grads, var) {
                buf.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `[C·k·k, Ho·Wo]` patch matrix of a zero-padded `[C, H, W]` image.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; c * k * k * p];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for i in 0..ho {
                    let yi = (i * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xj = (j * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        dst[i * wo + j] = x[ch * h * w + yi as usize * w + xj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    gx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for i in 0..ho {
                    let yi = (i * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xj = (j * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        gx[ch * h * w + yi as usize * w + xj as usize] += src[i * wo + j];
                    }
                }
            }
        }
    }
}
