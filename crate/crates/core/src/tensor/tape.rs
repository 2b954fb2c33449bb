use std::sync::atomic::{AtomicU32, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

/// Inputs to `exp` are clamped to `[-EXP_CLAMP, EXP_CLAMP]`; the gradient is
/// zero wherever the clamp was active.
pub const EXP_CLAMP: f64 = 20.0;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `active[i]` is false where the input was clamped.
    Exp { input: Var, active: Vec<bool> },
    Tanh(Var),
    LeakyRelu { input: Var, slope: f64 },
    Abs(Var),
    Scale { input: Var, factor: f64 },
    MaskMul { input: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Conv1d { input: Var, weight: Var, bias: Var },
    Linear { input: Var, weight: Var, bias: Var },
    /// Every second element of the last axis starting at `offset`.
    Strided { input: Var, offset: usize },
    Interleave(Var, Var),
    Slice { input: Var, start: usize },
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `tensor` as a leaf. Its `requires_grad` flag decides
    /// whether a gradient is produced for it.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = Tensor {
            shape: tensor.shape.clone(),
            data: tensor.data.clone(),
            requires_grad: false,
            grad: None,
        };
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an owned value that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.check(var).expect("variable belongs to a different tape");
        &self.nodes[var.index].value
    }

    /// Gradient of the last backward pass with respect to `var`, if any.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.id {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target`'s grad buffer.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = &self.nodes[input.index].value;
        let active: Vec<bool> = x.data.iter().map(|v| v.abs() <= EXP_CLAMP).collect();
        let data = x
            .data
            .iter()
            .map(|v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
            .collect();
        let shape = x.shape.clone();
        self.unary_result(input, shape, data, "exp", Op::Exp { input, active })
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.map(input, "tanh", f64::tanh, Op::Tanh(input))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        self.map(
            input,
            "leaky_relu",
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { input, slope },
        )
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        self.map(input, "abs", f64::abs, Op::Abs(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.map(input, "scale", |v| v * factor, Op::Scale { input, factor })
    }

    /// Elementwise product with a constant mask (used by dropout).
    pub fn mask_mul(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        self.check(input)?;
        let x = &self.nodes[input.index].value;
        if mask.len() != x.len() {
            return Err(Error::Dimension(format!(
                "mask of length {} for tensor of length {}",
                mask.len(),
                x.len()
            )));
        }
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = x.shape.clone();
        self.unary_result(input, shape, data, "mask_mul", Op::MaskMul { input, mask })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let total = self.nodes[input.index].value.data.iter().sum();
        self.unary_result(input, vec![1], vec![total], "sum", Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = &self.nodes[input.index].value;
        let m = x.data.iter().sum::<f64>() / x.len() as f64;
        self.unary_result(input, vec![1], vec![m], "mean", Op::Mean(input))
    }

    /// 1-D cross-correlation over `[B, C_in, T]` with replication padding of
    /// `(k - 1) / 2` on both ends, so the output keeps length `T`.
    ///
    /// `out[b, o, t] = bias[o] + sum_{c, j} weight[o, c, j] * x_pad[b, c, t + j]`
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let x = &self.nodes[input.index].value;
        let w = &self.nodes[weight.index].value;
        let b = &self.nodes[bias.index].value;
        let geom = ConvGeometry::new(x.shape(), w.shape(), b.shape())?;

        let mut out = vec![0.0; geom.batch * geom.c_out * geom.len];
        let mut padded = vec![0.0; geom.c_in * geom.padded_len()];
        for bi in 0..geom.batch {
            geom.pad_batch(&x.data, bi, &mut padded);
            for o in 0..geom.c_out {
                let row = &mut out[(bi * geom.c_out + o) * geom.len..][..geom.len];
                row.iter_mut().for_each(|v| *v = b.data[o]);
                for c in 0..geom.c_in {
                    let src = &padded[c * geom.padded_len()..][..geom.padded_len()];
                    for j in 0..geom.kernel {
                        let wv = w.data[(o * geom.c_in + c) * geom.kernel + j];
                        for (r, s) in row.iter_mut().zip(&src[j..j + geom.len]) {
                            *r += wv * s;
                        }
                    }
                }
            }
        }
        let requires_grad = self.any_grad(&[input, weight, bias]);
        self.finish(
            vec![geom.batch, geom.c_out, geom.len],
            out,
            "conv1d",
            Op::Conv1d {
                input,
                weight,
                bias,
            },
            requires_grad,
        )
    }

    /// Affine map along the last axis: `out = x · Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let x = &self.nodes[input.index].value;
        let w = &self.nodes[weight.index].value;
        let b = &self.nodes[bias.index].value;
        if w.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != w.shape[0] {
            return Err(Error::Dimension(format!(
                "linear expects weight [out, in] and bias [out], got {:?} and {:?}",
                w.shape, b.shape
            )));
        }
        let (n_out, n_in) = (w.shape[0], w.shape[1]);
        if x.last_dim() != n_in {
            return Err(Error::Dimension(format!(
                "linear input last axis {} does not match weight input size {}",
                x.last_dim(),
                n_in
            )));
        }
        let rows = x.len() / n_in;
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &x.data[r * n_in..][..n_in];
            for i in 0..n_out {
                let wr = &w.data[i * n_in..][..n_in];
                out[r * n_out + i] = b.data[i] + dot(xr, wr);
            }
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = n_out;
        let requires_grad = self.any_grad(&[input, weight, bias]);
        self.finish(
            shape,
            out,
            "linear",
            Op::Linear {
                input,
                weight,
                bias,
            },
            requires_grad,
        )
    }

    /// Elements at positions `offset, offset + 2, ...` of the last axis, which
    /// must have even length.
    pub fn strided(&mut self, input: Var, offset: usize) -> Result<Var> {
        self.check(input)?;
        debug_assert!(offset < 2);
        let x = &self.nodes[input.index].value;
        let n = x.last_dim();
        if !n.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "cannot split a sequence of odd length {n} into even and odd parts"
            )));
        }
        let half = n / 2;
        let rows = x.len() / n;
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            out.extend(x.data[r * n..][..n].iter().skip(offset).step_by(2));
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = half;
        self.unary_result(input, shape, out, "strided", Op::Strided { input, offset })
    }

    /// Inverse of [`Tape::strided`]: `out[2j] = even[j]`, `out[2j + 1] = odd[j]`.
    pub fn interleave(&mut self, even: Var, odd: Var) -> Result<Var> {
        self.check(even)?;
        self.check(odd)?;
        let e = &self.nodes[even.index].value;
        let o = &self.nodes[odd.index].value;
        if e.shape != o.shape {
            return Err(Error::Dimension(format!(
                "interleave operands differ: {:?} vs {:?}",
                e.shape, o.shape
            )));
        }
        let n = e.last_dim();
        let rows = e.len() / n;
        let mut out = Vec::with_capacity(2 * e.len());
        for r in 0..rows {
            for (a, b) in e.data[r * n..][..n].iter().zip(&o.data[r * n..][..n]) {
                out.push(*a);
                out.push(*b);
            }
        }
        let mut shape = e.shape.clone();
        *shape.last_mut().unwrap() = 2 * n;
        let requires_grad = self.any_grad(&[even, odd]);
        self.finish(shape, out, "interleave", Op::Interleave(even, odd), requires_grad)
    }

    /// `x[..., start .. start + len]`.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        self.check(input)?;
        let x = &self.nodes[input.index].value;
        let n = x.last_dim();
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for last axis of length {n}",
                start + len
            )));
        }
        let rows = x.len() / n;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.data[r * n + start..][..len]);
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = len;
        self.unary_result(input, shape, out, "slice", Op::Slice { input, start })
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let x = &self.nodes[a.index].value;
        let y = &self.nodes[b.index].value;
        let lead = x.shape.len() - 1;
        if x.shape.len() != y.shape.len() || x.shape[..lead] != y.shape[..lead] {
            return Err(Error::Dimension(format!(
                "cannot concatenate {:?} and {:?} along the last axis",
                x.shape, y.shape
            )));
        }
        let (na, nb) = (x.last_dim(), y.last_dim());
        let rows = x.len() / na;
        let mut out = Vec::with_capacity(x.len() + y.len());
        for r in 0..rows {
            out.extend_from_slice(&x.data[r * na..][..na]);
            out.extend_from_slice(&y.data[r * nb..][..nb]);
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = na + nb;
        let requires_grad = self.any_grad(&[a, b]);
        self.finish(shape, out, "concat", Op::Concat(a, b), requires_grad)
    }

    /// Reverse sweep from a scalar `loss`. Gradients from any previous sweep
    /// are discarded; repeated uses of a value accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let n = self.nodes[loss.index].value.len();
        if n != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {} elements",
                n
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let x = &self.nodes[a.index].value;
        let y = &self.nodes[b.index].value;
        if x.shape != y.shape {
            return Err(Error::Dimension(format!(
                "{name}: operand shapes differ: {:?} vs {:?}",
                x.shape, y.shape
            )));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let shape = x.shape.clone();
        let requires_grad = self.any_grad(&[a, b]);
        self.finish(shape, data, name, op, requires_grad)
    }

    fn map(
        &mut self,
        input: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check(input)?;
        let x = &self.nodes[input.index].value;
        let data = x.data.iter().map(|v| f(*v)).collect();
        let shape = x.shape.clone();
        self.unary_result(input, shape, data, name, op)
    }

    fn unary_result(
        &mut self,
        input: Var,
        shape: Vec<usize>,
        data: Vec<f64>,
        name: &'static str,
        op: Op,
    ) -> Result<Var> {
        let requires_grad = self.nodes[input.index].requires_grad;
        self.finish(shape, data, name, op, requires_grad)
    }

    fn finish(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        name: &'static str,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: name, index });
        }
        let value = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Usage(
                "variable was recorded on a different tape".into(),
            ));
        }
        Ok(())
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    kernel: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], b: &[usize]) -> Result<Self> {
        if x.len() != 3 || w.len() != 3 || b.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv1d expects x [B, C_in, T], w [C_out, C_in, k], b [C_out]; got {x:?}, {w:?}, {b:?}"
            )));
        }
        if w[2].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv1d kernel size must be odd, got {}",
                w[2]
            )));
        }
        if w[1] != x[1] {
            return Err(Error::Dimension(format!(
                "conv1d weight expects {} input channels, input has {}",
                w[1], x[1]
            )));
        }
        if b[0] != w[0] {
            return Err(Error::Dimension(format!(
                "conv1d bias has {} entries for {} output channels",
                b[0], w[0]
            )));
        }
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            c_out: w[0],
            len: x[2],
            kernel: w[2],
        })
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn padded_len(&self) -> usize {
        self.len + 2 * self.pad()
    }

    /// Unpadded index that padded position `p` replicates.
    fn source_index(&self, p: usize) -> usize {
        p.saturating_sub(self.pad()).min(self.len - 1)
    }

    fn pad_batch(&self, x: &[f64], bi: usize, out: &mut [f64]) {
        let plen = self.padded_len();
        for c in 0..self.c_in {
            let src = &x[(bi * self.c_in + c) * self.len..][..self.len];
            let dst = &mut out[c * plen..][..plen];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = src[self.source_index(p)];
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type Grads = [Option<Vec<f64>>];

/// Runs `f` on the gradient buffer of `var` (allocated on demand) together
/// with `var`'s forward value. Skips nodes that do not need gradients.
fn acc(nodes: &[Node], grads: &mut Grads, var: Var, f: impl FnOnce(&mut [f64], &[f64])) {
    let node = &nodes[var.index];
    if !node.requires_grad {
        return;
    }
    let buf = grads[var.index].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(buf, &node.value.data);
}

fn propagate(nodes: &[Node], grads: &mut Grads, idx: usize, g: &[f64]) {
    let node = &nodes[idx];
    let out = &node.value.data;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, a, |d, _| add_into(d, g));
            acc(nodes, grads, b, |d, _| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, a, |d, _| add_into(d, g));
            acc(nodes, grads, b, |d, _| {
                for (d, v) in d.iter_mut().zip(g) {
                    *d -= v;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = &nodes[a.index].value.data;
            let bv = &nodes[b.index].value.data;
            acc(nodes, grads, a, |d, _| {
                for ((d, v), y) in d.iter_mut().zip(g).zip(bv) {
                    *d += v * y;
                }
            });
            acc(nodes, grads, b, |d, _| {
                for ((d, v), x) in d.iter_mut().zip(g).zip(av) {
                    *d += v * x;
                }
            });
        }
        Op::Exp { input, ref active } => acc(nodes, grads, input, |d, _| {
            for (((d, v), y), on) in d.iter_mut().zip(g).zip(out).zip(active) {
                if *on {
                    *d += v * y;
                }
            }
        }),
        Op::Tanh(input) => acc(nodes, grads, input, |d, _| {
            for ((d, v), y) in d.iter_mut().zip(g).zip(out) {
                *d += v * (1.0 - y * y);
            }
        }),
        Op::LeakyRelu { input, slope } => acc(nodes, grads, input, |d, x| {
            for ((d, v), xv) in d.iter_mut().zip(g).zip(x) {
                *d += if *xv > 0.0 { *v } else { slope * v };
            }
        }),
        Op::Abs(input) => acc(nodes, grads, input, |d, x| {
            for ((d, v), xv) in d.iter_mut().zip(g).zip(x) {
                if *xv > 0.0 {
                    *d += v;
                } else if *xv < 0.0 {
                    *d -= v;
                }
            }
        }),
        Op::Scale { input, factor } => acc(nodes, grads, input, |d, _| {
            for (d, v) in d.iter_mut().zip(g) {
                *d += factor * v;
            }
        }),
        Op::MaskMul { input, ref mask } => acc(nodes, grads, input, |d, _| {
            for ((d, v), m) in d.iter_mut().zip(g).zip(mask) {
                *d += v * m;
            }
        }),
        Op::Sum(input) => acc(nodes, grads, input, |d, _| {
            d.iter_mut().for_each(|d| *d += g[0]);
        }),
        Op::Mean(input) => acc(nodes, grads, input, |d, _| {
            let s = g[0] / d.len() as f64;
            d.iter_mut().for_each(|d| *d += s);
        }),
        Op::Conv1d {
            input,
            weight,
            bias,
        } => conv1d_backward(nodes, grads, input, weight, bias, g),
        Op::Linear {
            input,
            weight,
            bias,
        } => linear_backward(nodes, grads, input, weight, bias, g),
        Op::Strided { input, offset } => {
            let n = nodes[input.index].value.last_dim();
            let half = n / 2;
            acc(nodes, grads, input, |d, _| {
                for (r, chunk) in g.chunks(half).enumerate() {
                    for (j, v) in chunk.iter().enumerate() {
                        d[r * n + 2 * j + offset] += v;
                    }
                }
            });
        }
        Op::Interleave(even, odd) => {
            acc(nodes, grads, even, |d, _| {
                for (d, v) in d.iter_mut().zip(g.iter().step_by(2)) {
                    *d += v;
                }
            });
            acc(nodes, grads, odd, |d, _| {
                for (d, v) in d.iter_mut().zip(g.iter().skip(1).step_by(2)) {
                    *d += v;
                }
            });
        }
        Op::Slice { input, start } => {
            let len = node.value.last_dim();
            let n = nodes[input.index].value.last_dim();
            acc(nodes, grads, input, |d, _| {
                for (r, chunk) in g.chunks(len).enumerate() {
                    add_into(&mut d[r * n + start..][..len], chunk);
                }
            });
        }
        Op::Concat(a, b) => {
            let na = nodes[a.index].value.last_dim();
            let nb = nodes[b.index].value.last_dim();
            acc(nodes, grads, a, |d, _| {
                for (r, chunk) in g.chunks(na + nb).enumerate() {
                    add_into(&mut d[r * na..][..na], &chunk[..na]);
                }
            });
            acc(nodes, grads, b, |d, _| {
                for (r, chunk) in g.chunks(na + nb).enumerate() {
                    add_into(&mut d[r * nb..][..nb], &chunk[na..]);
                }
            });
        }
    }
}

fn conv1d_backward(nodes: &[Node], grads: &mut Grads, input: Var, weight: Var, bias: Var, g: &[f64]) {
    let x = &nodes[input.index].value;
    let w = &nodes[weight.index].value;
    let b = &nodes[bias.index].value;
    let geom =
        ConvGeometry::new(x.shape(), w.shape(), b.shape()).expect("shapes were validated in forward");
    let plen = geom.padded_len();
    let want_x = nodes[input.index].requires_grad;
    let want_w = nodes[weight.index].requires_grad;
    let want_b = nodes[bias.index].requires_grad;

    let mut gx = vec![0.0; if want_x { x.len() } else { 0 }];
    let mut gw = vec![0.0; if want_w { w.len() } else { 0 }];
    let mut gb = vec![0.0; if want_b { b.len() } else { 0 }];
    let mut padded = vec![0.0; geom.c_in * plen];
    let mut gpad = vec![0.0; geom.c_in * plen];

    for bi in 0..geom.batch {
        if want_w {
            geom.pad_batch(&x.data, bi, &mut padded);
        }
        if want_x {
            gpad.iter_mut().for_each(|v| *v = 0.0);
        }
        for o in 0..geom.c_out {
            let go = &g[(bi * geom.c_out + o) * geom.len..][..geom.len];
            if want_b {
                gb[o] += go.iter().sum::<f64>();
            }
            for c in 0..geom.c_in {
                for j in 0..geom.kernel {
                    let widx = (o * geom.c_in + c) * geom.kernel + j;
                    if want_w {
                        gw[widx] += dot(go, &padded[c * plen + j..][..geom.len]);
                    }
                    if want_x {
                        let wv = w.data[widx];
                        for (d, v) in gpad[c * plen + j..][..geom.len].iter_mut().zip(go) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
        if want_x {
            // Fold the padded gradient back onto the replicated edge samples.
            for c in 0..geom.c_in {
                let dst = &mut gx[(bi * geom.c_in + c) * geom.len..][..geom.len];
                for (p, v) in gpad[c * plen..][..plen].iter().enumerate() {
                    dst[geom.source_index(p)] += v;
                }
            }
        }
    }
    acc(nodes, grads, input, |d, _| add_into(d, &gx));
    acc(nodes, grads, weight, |d, _| add_into(d, &gw));
    acc(nodes, grads, bias, |d, _| add_into(d, &gb));
}

fn linear_backward(nodes: &[Node], grads: &mut Grads, input: Var, weight: Var, bias: Var, g: &[f64]) {
    let x = &nodes[input.index].value;
    let w = &nodes[weight.index].value;
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    let rows = x.len() / n_in;
    let want_x = nodes[input.index].requires_grad;
    let want_w = nodes[weight.index].requires_grad;
    let want_b = nodes[bias.index].requires_grad;

    let mut gx = vec![0.0; if want_x { x.len() } else { 0 }];
    let mut gw = vec![0.0; if want_w { w.len() } else { 0 }];
    let mut gb = vec![0.0; if want_b { n_out } else { 0 }];
    for r in 0..rows {
        let xr = &x.data[r * n_in..][..n_in];
        for i in 0..n_out {
            let gv = g[r * n_out + i];
            if want_b {
                gb[i] += gv;
            }
            if want_w {
                for (d, xv) in gw[i * n_in..][..n_in].iter_mut().zip(xr) {
                    *d += gv * xv;
                }
            }
            if want_x {
                let wr = &w.data[i * n_in..][..n_in];
                for (d, wv) in gx[r * n_in..][..n_in].iter_mut().zip(wr) {
                    *d += gv * wv;
                }
            }
        }
    }
    acc(nodes, grads, input, |d, _| add_into(d, &gx));
    acc(nodes, grads, weight, |d, _| add_into(d, &gw));
    acc(nodes, grads, bias, |d, _| add_into(d, &gb));
}
