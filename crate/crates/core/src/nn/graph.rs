//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse. Parameters are read from a borrowed
//! [`ParamStore`] without copying.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::gemm;
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a square-kernel 2-D convolution over planar `[C, H*W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = oh * ow;
        let k = self.kernel;
        let mut cols = vec![0.0; self.patch_len() * n];
        for c in 0..self.in_channels {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = oh * ow;
        let k = self.kernel;
        for c in 0..self.in_channels {
            let base = c * self.in_h * self.in_w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                out[base + iy as usize * self.in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddColBias(Var, Var),
    MulRowBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    /// The graph node for a parameter; repeated calls return the same node so
    /// gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.shape();
        let (k2, n) = tb.shape();
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.push(Op::MatMul(a, b), Tensor::new(m, n, out))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes differ");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), data);
        self.push(op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[r, c] + b[r]`, broadcasting the column `b` across columns.
    pub fn add_col_bias(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape(), (ta.rows(), 1), "bias must be a column");
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for (r, chunk) in data.chunks_exact_mut(cols).enumerate() {
            let bias = tb.data()[r];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::new(ta.rows(), cols, data);
        self.push(Op::AddColBias(a, b), t)
    }

    /// `a[r, c] * g[c]`, scaling each column of `a` by the row vector `g`.
    pub fn mul_row_broadcast(&mut self, a: Var, g: Var) -> Var {
        let (ta, tg) = (self.value(a), self.value(g));
        assert_eq!(tg.shape(), (1, ta.cols()), "gate must be a row");
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            chunk.iter_mut().zip(tg.data()).for_each(|(v, s)| *v *= s);
        }
        let t = Tensor::new(ta.rows(), cols, data);
        self.push(Op::MulRowBroadcast(a, g), t)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        self.push(op, t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(ta.rows(), cols, data);
        self.push(Op::SoftmaxRows(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(Op::Transpose(a), t)
    }

    /// Vertical concatenation; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat column counts differ");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(rows, cols, data))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        assert!(start + len <= ta.rows(), "row slice out of range");
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Op::SliceRows(a, start, len), Tensor::new(len, cols, data))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), rows * cols, "reshape changes element count");
        let t = Tensor::new(rows, cols, ta.data().to_vec());
        self.push(Op::Reshape(a), t)
    }

    /// Convolution of planar input `[Cin, H*W]` with weight
    /// `[Cout, Cin*k*k]` and bias `[Cout, 1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let ti = self.value(input);
        assert_eq!(ti.len(), geom.in_channels * geom.in_h * geom.in_w, "conv input size");
        let tw = self.value(weight);
        assert_eq!(tw.shape(), (geom.out_channels, geom.patch_len()), "conv weight shape");
        let tb = self.value(bias);
        assert_eq!(tb.shape(), (geom.out_channels, 1), "conv bias shape");
        let cols = geom.im2col(ti.data());
        let n = geom.out_h() * geom.out_w();
        let mut out = vec![0.0; geom.out_channels * n];
        gemm(
            geom.out_channels,
            geom.patch_len(),
            n,
            tw.data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        for (o, chunk) in out.chunks_exact_mut(n).enumerate() {
            let b = tb.data()[o];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let t = Tensor::new(geom.out_channels, n, out);
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            t,
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = self.value(Var(i));
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.shape();
                    let n = tb.cols();
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    accumulate(&mut grads, *a, Tensor::new(m, k, da));
                    accumulate(&mut grads, *b, Tensor::new(k, n, db));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = elementwise(&g, self.value(*b), |g, y| g * y);
                    let db = elementwise(&g, self.value(*a), |g, x| g * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let tb = self.value(*b);
                    let da = elementwise(&g, tb, |g, y| g / y);
                    let db = elementwise(&da, out, |d, q| -d * q);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddColBias(a, b) => {
                    let cols = g.cols();
                    let db: Vec<f64> = g.data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
                    accumulate(&mut grads, *b, Tensor::column(db));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRowBroadcast(a, gate) => {
                    let ta = self.value(*a);
                    let tg = self.value(*gate);
                    let cols = ta.cols();
                    let mut da = g.data().to_vec();
                    let mut dg = vec![0.0; cols];
                    for (r, chunk) in da.chunks_exact_mut(cols).enumerate() {
                        let arow = &ta.data()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dg[c] += chunk[c] * arow[c];
                            chunk[c] *= tg.data()[c];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(ta.rows(), cols, da));
                    accumulate(&mut grads, *gate, Tensor::new(1, cols, dg));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::new(ta.rows(), ta.cols(), g.into_data()));
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, elementwise(&g, out, |g, y| g * y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    accumulate(&mut grads, *a, elementwise(&g, out, |g, y| g * (1.0 - y * y)));
                }
                Op::Elu(a) => {
                    let d = elementwise(&g, out, |g, y| if y > 0.0 { g } else { g * (y + 1.0) });
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = elementwise(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, elementwise(&g, out, |g, y| g * y));
                }
                Op::Log(a) => {
                    let d = elementwise(&g, self.value(*a), |g, x| g / x);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    accumulate(&mut grads, *a, elementwise(&g, out, |g, y| 0.5 * g / y));
                }
                Op::Square(a) => {
                    let d = elementwise(&g, self.value(*a), |g, x| 2.0 * g * x);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(ta.rows(), ta.cols(), g.item()));
                }
                Op::SoftmaxRows(a) => {
                    let cols = out.cols();
                    let mut d = vec![0.0; out.len()];
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(cols)
                        .zip(g.data().chunks_exact(cols))
                        .zip(out.data().chunks_exact(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for c in 0..cols {
                            drow[c] = yrow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(out.rows(), cols, d));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, *p, Tensor::new(rows, cols, data));
                        offset += rows;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let ta = self.value(*a);
                    let cols = ta.cols();
                    let mut d = Tensor::zeros(ta.rows(), cols);
                    d.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, d);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let ti = self.value(*input);
                    let tw = self.value(*weight);
                    let n = geom.out_h() * geom.out_w();
                    let p = geom.patch_len();
                    let cols = geom.im2col(ti.data());

                    let mut dw = vec![0.0; geom.out_channels * p];
                    gemm(geom.out_channels, n, p, g.data(), false, &cols, true, &mut dw, false);
                    let db: Vec<f64> = g.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
                    let mut dcols = vec![0.0; p * n];
                    gemm(p, geom.out_channels, n, tw.data(), true, g.data(), false, &mut dcols, false);
                    let mut di = vec![0.0; ti.len()];
                    geom.col2im(&dcols, &mut di);

                    accumulate(&mut grads, *weight, Tensor::new(geom.out_channels, p, dw));
                    accumulate(&mut grads, *bias, Tensor::column(db));
                    accumulate(&mut grads, *input, Tensor::new(ti.rows(), ti.cols(), di));
                }
            }
        }

        let mut out = ParamGrads::zeros_like(self.params);
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads[v.0].take() {
                    out.0[pid] = g;
                }
            }
        }
        out
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.rows(), g.cols(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over every scalar of every parameter.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let eps = 1e-5;
        for flat in 0..store.scalar_count() {
            let (id, off) = store.locate(flat);
            let orig = store.get(id).data()[off];
            store.get_mut(id).data_mut()[off] = orig + eps;
            let up = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[off] = orig - eps;
            let down = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[off] = orig;
            let fd = (up - down) / (2.0 * eps);
            let bp = grads.0[id.0].data()[off];
            let err = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-3);
            assert!(err < 1e-5, "param {} [{off}]: fd {fd} vs bp {bp}", store.name(id));
        }
    }

    fn random_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for &(name, r, c) in shapes {
            store.add(name, Tensor::glorot(r, c, c, r, &mut rng));
        }
        store
    }

    #[test]
    fn dense_ops_gradients() {
        let mut store = random_store(&[("w", 3, 4), ("b", 3, 1), ("x", 4, 2), ("g", 1, 2)], 1);
        check(&mut store, |g| {
            let w = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let x = g.param(ParamId(2));
            let gate = g.param(ParamId(3));
            let h = g.matmul(w, x);
            let h = g.add_col_bias(h, b);
            let s = g.sigmoid(gate);
            let h = g.mul_row_broadcast(h, s);
            let t = g.tanh(h);
            let e = g.elu(t);
            let sm = g.softmax_rows(e);
            let tr = g.transpose(sm);
            let sq = g.square(tr);
            let ex = g.exp(sq);
            let lg = g.log(ex);
            let sl = g.slice_rows(lg, 0, 1);
            let cat = g.concat_rows(&[sl, tr]);
            let rs = g.reshape(cat, 1, 9);
            let sc = g.scale(rs, 0.7);
            let sh = g.add_scalar(sc, 2.0);
            let rt = g.sqrt(sh);
            let m = g.mul(rt, rt);
            let q = g.div(m, sh);
            let d = g.sub(q, rs);
            g.sum(d)
        });
    }

    #[test]
    fn conv_gradients() {
        let geom = ConvGeom {
            in_channels: 2,
            in_h: 5,
            in_w: 6,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut store = random_store(
            &[
                ("x", 2, 30),
                ("w", 3, geom.patch_len()),
                ("b", 3, 1),
            ],
            2,
        );
        check(&mut store, |g| {
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let b = g.param(ParamId(2));
            let y = g.conv2d(x, w, b, geom);
            let y = g.tanh(y);
            let y = g.square(y);
            g.sum(y)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let geom = ConvGeom {
            in_channels: 1,
            in_h: 4,
            in_w: 4,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut store = ParamStore::new();
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let w = vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let xi = store.add("x", Tensor::new(1, 16, x.clone()));
        let wi = store.add("w", Tensor::new(1, 9, w.clone()));
        let bi = store.add("b", Tensor::column(vec![0.5]));
        let mut g = Graph::new(&store);
        let (xv, wv, bv) = (g.param(xi), g.param(wi), g.param(bi));
        let y = g.conv2d(xv, wv, bv, geom);
        let out = g.value(y);
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                let mut acc = 0.5;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += w[(ky * 3 + kx) as usize] * x[(iy * 4 + ix) as usize];
                        }
                    }
                }
                assert!((out.data()[(oy * 4 + ox) as usize] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_param_node_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::column(vec![3.0]));
        let mut g = Graph::new(&store);
        let a1 = g.param(id);
        let a2 = g.param(id);
        assert_eq!(a1, a2);
        let y = g.mul(a1, a2);
        let grads = g.backward(y);
        assert_eq!(grads.0[0].data(), &[6.0]);
    }
}
