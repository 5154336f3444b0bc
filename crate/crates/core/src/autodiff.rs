//! Tape-based reverse-mode differentiation over the handful of tensor ops
//! the denoiser and the state-propagation cells need.
//!
//! Sequence tensors are laid out channel-major, `(channels, length)`.
//! Parameters are referenced by index into a borrowed parameter list and are
//! never copied onto the tape; their gradients land in a [`Gradients`]
//! buffer aligned with that list.

use crate::error::{shape, Error, Result};
use crate::tensor::{col2im, conv_out_len, im2col, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        /// Unfolded input; empty for pointwise convolutions, which read `x`.
        cols: Vec<F>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, F),
    AddChannels(Var, Var),
    Concat(Vec<Var>),
    Upsample2(Var),
    Row {
        table: Var,
        index: usize,
    },
    Broadcast {
        v: Var,
    },
    MaskedMse {
        pred: Var,
        target: Vec<F>,
        weight: Vec<F>,
        denom: F,
    },
    Sum(Vec<Var>),
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
    requires_grad: bool,
}

/// Per-parameter gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(params: &[Tensor<F>]) -> Self {
        Gradients {
            tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Element-wise accumulation of another gradient set.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> F {
        self.tensors
            .iter()
            .map(|t| t.sum_sq())
            .fold(F::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn all_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&x| x == F::zero()))
    }
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p, F: Real> {
    params: &'p [Tensor<F>],
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p [Tensor<F>]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter nodes always hold a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Input, t, false)
    }

    /// Records (once) the parameter at `index`.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    /// 1D convolution of `x: (cin, len)` with `w: (cout, cin, k)` plus bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            return Err(shape(format!("conv1d input {xs:?} weight {ws:?}")));
        }
        let (cin, len, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
        if len + 2 * pad < k {
            return Err(shape(format!("conv1d kernel {k} longer than padded input {len}")));
        }
        let lout = conv_out_len(len, k, stride, pad);
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let mut cols = Vec::new();
        if !pointwise {
            cols = vec![F::zero(); cin * k * lout];
            im2col(self.value(x).data(), cin, len, k, stride, pad, lout, &mut cols);
        }
        let mut out = vec![F::zero(); cout * lout];
        {
            let bias = self.value(b).data();
            for (c, row) in out.chunks_mut(lout).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[c]);
            }
            let src = if pointwise { self.value(x).data() } else { &cols };
            F::gemm(
                cout,
                cin * k,
                lout,
                F::one(),
                self.value(w).data(),
                (cin * k) as isize,
                1,
                src,
                lout as isize,
                1,
                F::one(),
                &mut out,
                lout as isize,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::from_vec(&[cout, lout], out)?;
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            value,
            rg,
        ))
    }

    /// `w·x + b` for a vector `x: (n)`, `w: (m, n)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            return Err(shape(format!("linear input {xs:?} weight {ws:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let out: Vec<F> = (0..m)
            .map(|i| {
                let row = &wv[i * n..(i + 1) * n];
                row.iter().zip(xv).map(|(&a, &c)| a * c).sum::<F>() + bv[i]
            })
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::from_vec(&[m], out)?;
        Ok(self.push(Op::Linear { x, w, b }, value, rg))
    }

    /// Group normalization of `(channels, len)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] % groups != 0 || self.shape(gamma) != [xs[0]] || self.shape(beta) != [xs[0]] {
            return Err(shape(format!("group_norm input {xs:?} with {groups} groups")));
        }
        let (c, len) = (xs[0], xs[1]);
        let per = c / groups * len;
        let eps = F::lit(1e-5);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![F::zero(); c * len];
        let mut rstd = vec![F::zero(); groups];
        let mut out = vec![F::zero(); c * len];
        let n = F::lit(per as f64);
        for gi in 0..groups {
            let span = gi * per..(gi + 1) * per;
            let mean = xv[span.clone()].iter().copied().sum::<F>() / n;
            let var = xv[span.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd[gi] = r;
            for idx in span {
                let ch = idx / len;
                let h = (xv[idx] - mean) * r;
                xhat[idx] = h;
                out[idx] = h * g[ch] + bt[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_vec(&[c, len], out)?;
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            value,
            rg,
        ))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(op, value, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, Op::OneMinus(x), |v| F::one() - v)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a per-channel vector `v: (c)` to `x: (c, len)`.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(v) != [xs[0]] {
            return Err(shape(format!("add_channels {xs:?} + {:?}", self.shape(v))));
        }
        let len = xs[1];
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (c, row) in out.chunks_mut(len).enumerate() {
            row.iter_mut().for_each(|e| *e += vv[c]);
        }
        let rg = self.rg(x) || self.rg(v);
        let value = Tensor::from_vec(&xs, out)?;
        Ok(self.push(Op::AddChannels(x, v), value, rg))
    }

    /// Concatenates `(c_i, len)` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let len = self.shape(parts[0])[1];
        let mut c = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != len {
                return Err(shape(format!("concat part {s:?} with length {len}")));
            }
            c += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::from_vec(&[c, len], out)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value, rg))
    }

    /// Nearest-neighbour upsampling by two along the length axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape(format!("upsample2 {xs:?}")));
        }
        let out: Vec<F> = self.value(x).data().iter().flat_map(|&v| [v, v]).collect();
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[xs[0], xs[1] * 2], out)?;
        Ok(self.push(Op::Upsample2(x), value, rg))
    }

    /// Row `index` of a `(rows, d)` table.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index >= ts[0] {
            return Err(shape(format!("row {index} of table {ts:?}")));
        }
        let d = ts[1];
        let data = self.value(table).data()[index * d..(index + 1) * d].to_vec();
        let rg = self.rg(table);
        let value = Tensor::from_vec(&[d], data)?;
        Ok(self.push(Op::Row { table, index }, value, rg))
    }

    /// Repeats a `(d)` vector along a new length axis: `(d, len)`.
    pub fn broadcast(&mut self, v: Var, len: usize) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        if vs.len() != 1 {
            return Err(shape(format!("broadcast of {vs:?}")));
        }
        let out: Vec<F> = self
            .value(v)
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, len))
            .collect();
        let rg = self.rg(v);
        let value = Tensor::from_vec(&[vs[0], len], out)?;
        Ok(self.push(Op::Broadcast { v }, value, rg))
    }

    /// `Σ weight·(pred − target)² / denom`, a scalar.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<F>, weight: Vec<F>, denom: F) -> Result<Var> {
        let pv = self.value(pred).data();
        if target.len() != pv.len() || weight.len() != pv.len() {
            return Err(shape("masked_mse target/weight length"));
        }
        let loss = pv
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&p, &t), &w)| w * (p - t) * (p - t))
            .sum::<F>()
            / denom;
        let rg = self.rg(pred);
        Ok(self.push(
            Op::MaskedMse {
                pred,
                target,
                weight,
                denom,
            },
            Tensor::from_vec(&[1], vec![loss])?,
            rg,
        ))
    }

    /// Sum of scalars.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = F::zero();
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return Err(shape("sum expects scalars"));
            }
            acc += v.data()[0];
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Sum(parts.to_vec()), Tensor::from_vec(&[1], vec![acc])?, rg))
    }

    /// Backpropagates from a scalar output with unit seed.
    pub fn backward(&self, out: Var) -> Result<Gradients<F>> {
        let seed = Tensor::from_vec(&[1], vec![F::one()])?;
        self.backward_with_seed(out, &seed)
    }

    /// Backpropagates `seed` (shaped like `out`) through the recording.
    pub fn backward_with_seed(&self, out: Var, seed: &Tensor<F>) -> Result<Gradients<F>> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(Error::Autodiff("backward called without a recorded forward pass".into()));
        }
        if seed.shape() != self.shape(out) {
            return Err(shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(seed.data().to_vec());
        let mut result = Gradients::zeros_like(self.params);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, i, &g, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); self.value(v).len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        index: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        result: &mut Gradients<F>,
    ) {
        let out_value = || node.value.as_ref().unwrap().data();
        match &node.op {
            Op::Input => {}
            Op::Param(p) => {
                for (a, &b) in result.tensors[*p].data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (cin, len, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
                let lout = self.shape(Var(index))[1];
                let pointwise = cols.is_empty();
                self.acc(grads, *b, |db| {
                    for (c, row) in g.chunks(lout).enumerate() {
                        db[c] += row.iter().copied().sum::<F>();
                    }
                });
                let src: &[F] = if pointwise { self.value(*x).data() } else { cols };
                self.acc(grads, *w, |dw| {
                    // dW (cout × cin·k) += g (cout × lout) · colsᵀ
                    F::gemm(
                        cout,
                        lout,
                        cin * k,
                        F::one(),
                        g,
                        lout as isize,
                        1,
                        src,
                        1,
                        lout as isize,
                        F::one(),
                        dw,
                        (cin * k) as isize,
                        1,
                    );
                });
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    if pointwise {
                        self.acc(grads, *x, |dx| {
                            F::gemm(
                                cin,
                                cout,
                                len,
                                F::one(),
                                wv,
                                1,
                                cin as isize,
                                g,
                                lout as isize,
                                1,
                                F::one(),
                                dx,
                                len as isize,
                                1,
                            );
                        });
                    } else {
                        let mut dcols = vec![F::zero(); cin * k * lout];
                        F::gemm(
                            cin * k,
                            cout,
                            lout,
                            F::one(),
                            wv,
                            1,
                            (cin * k) as isize,
                            g,
                            lout as isize,
                            1,
                            F::zero(),
                            &mut dcols,
                            lout as isize,
                            1,
                        );
                        self.acc(grads, *x, |dx| {
                            col2im(&dcols, cin, len, k, *stride, *pad, lout, dx);
                        });
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let n = self.shape(*x)[0];
                self.acc(grads, *b, |db| {
                    for (a, &v) in db.iter_mut().zip(g) {
                        *a += v;
                    }
                });
                let xv = self.value(*x).data();
                self.acc(grads, *w, |dw| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (d, &xj) in dw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                            *d += gi * xj;
                        }
                    }
                });
                let wv = self.value(*w).data();
                self.acc(grads, *x, |dx| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (d, &wij) in dx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *d += gi * wij;
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xs = self.shape(*x);
                let (c, len) = (xs[0], xs[1]);
                let per = c / groups * len;
                self.acc(grads, *beta, |db| {
                    for (ch, row) in g.chunks(len).enumerate() {
                        db[ch] += row.iter().copied().sum::<F>();
                    }
                });
                self.acc(grads, *gamma, |dg| {
                    for ch in 0..c {
                        let span = ch * len..(ch + 1) * len;
                        dg[ch] += g[span.clone()].iter().zip(&xhat[span]).map(|(&a, &b)| a * b).sum::<F>();
                    }
                });
                if self.rg(*x) {
                    let gv = self.value(*gamma).data();
                    let n = F::lit(per as f64);
                    self.acc(grads, *x, |dx| {
                        for gi in 0..*groups {
                            let span = gi * per..(gi + 1) * per;
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for idx in span.clone() {
                                let dh = g[idx] * gv[idx / len];
                                s1 += dh;
                                s2 += dh * xhat[idx];
                            }
                            let r = rstd[gi];
                            for idx in span {
                                let dh = g[idx] * gv[idx / len];
                                dx[idx] += r / n * (n * dh - s1 - xhat[idx] * s2);
                            }
                        }
                    });
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *d += gi * s * (F::one() + v * (F::one() - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out_value();
                self.acc(grads, *x, |dx| {
                    for ((d, &gi), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * s * (F::one() - s);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out_value();
                self.acc(grads, *x, |dx| {
                    for ((d, &gi), &t) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (F::one() - t * t);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for ((x, &gi), &o) in d.iter_mut().zip(g).zip(bv) {
                        *x += gi * o;
                    }
                });
                let av = self.value(*a).data();
                self.acc(grads, *b, |d| {
                    for ((x, &gi), &o) in d.iter_mut().zip(g).zip(av) {
                        *x += gi * o;
                    }
                });
            }
            Op::OneMinus(x) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, &b)| *a -= b));
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s));
            }
            Op::AddChannels(x, v) => {
                let len = self.shape(*x)[1];
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                self.acc(grads, *v, |d| {
                    for (c, row) in g.chunks(len).enumerate() {
                        d[c] += row.iter().copied().sum::<F>();
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let slice = &g[off..off + n];
                    self.acc(grads, p, |d| d.iter_mut().zip(slice).for_each(|(a, &b)| *a += b));
                    off += n;
                }
            }
            Op::Upsample2(x) => {
                self.acc(grads, *x, |d| {
                    for (i, a) in d.iter_mut().enumerate() {
                        *a += g[2 * i] + g[2 * i + 1];
                    }
                });
            }
            Op::Row { table, index } => {
                let d = g.len();
                self.acc(grads, *table, |dt| {
                    for (a, &b) in dt[index * d..(index + 1) * d].iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
            Op::Broadcast { v } => {
                let len = self.shape(Var(index))[1];
                self.acc(grads, *v, |d| {
                    for (c, row) in g.chunks(len).enumerate() {
                        d[c] += row.iter().copied().sum::<F>();
                    }
                });
            }
            Op::MaskedMse {
                pred,
                target,
                weight,
                denom,
            } => {
                let pv = self.value(*pred).data();
                let s = g[0] * F::lit(2.0) / *denom;
                self.acc(grads, *pred, |d| {
                    for (((a, &p), &t), &w) in d.iter_mut().zip(pv).zip(target).zip(weight) {
                        *a += s * w * (p - t);
                    }
                });
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.acc(grads, p, |d| d[0] += g[0]);
                }
            }
        }
    }
}
