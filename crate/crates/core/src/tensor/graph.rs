//! Tape of executed operations and its reverse sweep.

use super::conv::{self, ConvGeometry, ConvSpec};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Dense { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    LeakyRelu { x: Var, alpha: T },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Clip { x: Var, lo: Vec<T>, hi: Vec<T> },
    MeanChannels { x: Var },
    SymmetricL2 { a: Var, b: Var, plus: Vec<bool>, squared: bool },
    Exp { x: Var },
    Log { x: Var },
    Affine { x: Var, scale: T },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Paste { patch: Var, context: Var, offset: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation. A graph supports exactly one backward
/// sweep; build a new one for every forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Linear part of a convolutional layer (`[N,X,Y,Z,Cin]` in, `[N,X',Y',Z',Cout]` out).
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), spec)?;
        if self.shape(b) != [geom.cout] {
            return Err(Error::contract(format!(
                "conv3d bias {:?} should be [{}]",
                self.shape(b),
                geom.cout
            )));
        }
        let data = conv::forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Tensor::new(geom.output_shape(), data)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, &[x, w, b]))
    }

    /// Affine map `[N,F] x [F,O] + [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[n, f], &[wf, o]) = (xs, ws) else {
            return Err(Error::contract(format!("dense expects [N,F] x [F,O], got {xs:?} x {ws:?}")));
        };
        if f != wf || self.shape(b) != [o] {
            return Err(Error::contract(format!(
                "dense feature mismatch: input {xs:?}, weights {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n, f, o, T::one(), self.value(x).data(), f as isize, 1, self.value(w).data(), o as isize, 1,
            T::one(), &mut out, o as isize, 1,
        );
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        debug_assert!(alpha >= T::zero() && alpha < T::one());
        self.map(x, |v| if v > T::zero() { v } else { alpha * v }, Op::LeakyRelu { x, alpha })
    }

    /// Logistic function, kept inside `[eps, 1 - eps]` so it never saturates to 0 or 1.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let eps = T::epsilon();
        let hi = T::one() - eps;
        self.map(
            x,
            |v| (T::one() / (T::one() + (-v).exp())).max(eps).min(hi),
            Op::Sigmoid { x },
        )
    }

    /// Batch normalization over every axis but the last (channel) one.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let src = self.value(x);
        let c = src.channels();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::contract(format!("batch_norm affine params must be [{c}]")));
        }
        let rows = src.len() / c;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                if rows < 2 {
                    return Err(Error::contract("train-mode batch_norm needs at least 2 values per channel"));
                }
                let mut mean = vec![T::zero(); c];
                for row in src.data().chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += *v;
                    }
                }
                let count = T::from_usize(rows).expect("row count");
                mean.iter_mut().for_each(|m| *m = *m / count);
                let mut var = vec![T::zero(); c];
                for row in src.data().chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (*v - *m) * (*v - *m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / count);
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::contract("running statistics have the wrong channel count"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let stats = train.then_some(BatchStats { mean, var });
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Clamp every element to `[lo, hi]`; bounds are per channel (last axis)
    /// or a single pair broadcast to all channels.
    pub fn clip(&mut self, x: Var, lo: &[T], hi: &[T]) -> Result<Var> {
        let c = self.value(x).channels();
        let widen = |b: &[T]| -> Result<Vec<T>> {
            match b.len() {
                1 => Ok(vec![b[0]; c]),
                l if l == c => Ok(b.to_vec()),
                l => Err(Error::contract(format!("clip bounds have {l} entries for {c} channels"))),
            }
        };
        let (lo, hi) = (widen(lo)?, widen(hi)?);
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::contract("clip lower bound exceeds upper bound"));
        }
        let src = self.value(x);
        let data = src
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(lo.iter().zip(&hi)).map(|(v, (l, h))| v.max(*l).min(*h)))
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Clip { x, lo, hi }, &[x]))
    }

    /// Mean over the last axis, kept as a size-1 axis.
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.channels();
        let inv = T::one() / T::from_usize(c).expect("channel count");
        let data: Vec<T> = src
            .data()
            .chunks(c)
            .map(|row| row.iter().fold(T::zero(), |acc, v| acc + *v) * inv)
            .collect();
        let mut shape = src.shape().to_vec();
        *shape.last_mut().expect("non-empty") = 1;
        let value = Tensor::new(shape, data).expect("reduced shape");
        self.push(value, Op::MeanChannels { x }, &[x])
    }

    /// Per-voxel `min(|a - b|, |a + b|)` over trailing 3-vectors, shape `[..., 1]`.
    /// With `squared` the squared distance is returned instead.
    pub fn symmetric_l2(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        self.same_shape(a, b, "symmetric_l2")?;
        if self.value(a).channels() != 3 {
            return Err(Error::contract("symmetric_l2 expects trailing 3-vectors"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() / 3);
        let mut plus = Vec::with_capacity(av.len() / 3);
        for (x, y) in av.chunks(3).zip(bv.chunks(3)) {
            let (minus_sq, plus_sq) = crate::field::branch_norms_sq([x[0], x[1], x[2]], [y[0], y[1], y[2]]);
            let use_plus = plus_sq < minus_sq;
            let sq = if use_plus { plus_sq } else { minus_sq };
            plus.push(use_plus);
            out.push(if squared { sq } else { sq.sqrt() });
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("non-empty") = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SymmetricL2 { a, b, plus, squared }, &[a, b]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), Op::Log { x })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Sum of all elements as a one-element tensor (sequential, left to right).
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |acc, v| acc + *v);
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).expect("element count");
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Context cube with its central region replaced by `patch`.
    /// `patch` is `[B,n,n,n,C]`, `context` is `[B,L,L,L,C]`, and the patch's
    /// low corner sits at `offset` along every spatial axis.
    pub fn paste(&mut self, patch: Var, context: Var, offset: usize) -> Result<Var> {
        let (ps, cs) = (self.shape(patch).to_vec(), self.shape(context).to_vec());
        let ok = ps.len() == 5
            && cs.len() == 5
            && ps[0] == cs[0]
            && ps[4] == cs[4]
            && (1..4).all(|a| offset + ps[a] <= cs[a]);
        if !ok {
            return Err(Error::contract(format!(
                "cannot paste patch {ps:?} into context {cs:?} at offset {offset}"
            )));
        }
        let mut value = self.value(context).clone();
        let src = self.value(patch).data();
        let out = value.data_mut();
        for_each_patch_row(&ps, &cs, offset, |p, c, len| {
            out[c..c + len].copy_from_slice(&src[p..p + len]);
        });
        Ok(self.push(value, Op::Paste { patch, context, offset }, &[patch, context]))
    }

    /// Reverse sweep from a one-element `loss`. Leaves that do not influence
    /// the loss get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardReplayed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contribution: Vec<T>| accumulate(grads, v, contribution);
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let cg = conv::backward(geom, self.value(*x).data(), self.value(*w).data(), g, needs(*x), needs(*w));
                if let Some(gx) = cg.input {
                    acc(*x, gx);
                }
                if needs(*w) {
                    acc(*w, cg.weight);
                }
                if needs(*b) {
                    acc(*b, cg.bias);
                }
            }
            Op::Dense { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[1];
                if needs(*x) {
                    let mut gx = vec![T::zero(); n * f];
                    T::gemm(
                        n, o, f, T::one(), g, o as isize, 1, self.value(*w).data(), 1, o as isize,
                        T::zero(), &mut gx, f as isize, 1,
                    );
                    acc(*x, gx);
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); f * o];
                    T::gemm(
                        f, n, o, T::one(), self.value(*x).data(), 1, f as isize, g, o as isize, 1,
                        T::zero(), &mut gw, o as isize, 1,
                    );
                    acc(*w, gw);
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
                    }
                    acc(*b, gb);
                }
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::LeakyRelu { x, alpha } => {
                let gx = zip_map(self.value(*x).data(), g, |v, gi| if v > T::zero() { gi } else { *alpha * gi });
                acc(*x, gx);
            }
            Op::Sigmoid { x } => {
                let gx = zip_map(node.value.data(), g, |y, gi| gi * y * (T::one() - y));
                acc(*x, gx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * hrow[ch];
                    }
                }
                if needs(*x) {
                    let m = T::from_usize(rows).expect("rows");
                    let mut gx = Vec::with_capacity(xhat.len());
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            gx.push(if *train {
                                scale * (grow[ch] - sum_g[ch] / m - hrow[ch] * sum_gx[ch] / m)
                            } else {
                                scale * grow[ch]
                            });
                        }
                    }
                    acc(*x, gx);
                }
                if needs(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if needs(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::Clip { x, lo, hi } => {
                let c = lo.len();
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .enumerate()
                    .map(|(i, (v, gi))| {
                        let ch = i % c;
                        if *v < lo[ch] || *v > hi[ch] {
                            T::zero()
                        } else {
                            *gi
                        }
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::MeanChannels { x } => {
                let c = self.value(*x).channels();
                let inv = T::one() / T::from_usize(c).expect("channels");
                let gx = g.iter().flat_map(|gi| std::iter::repeat_n(*gi * inv, c)).collect();
                acc(*x, gx);
            }
            Op::SymmetricL2 { a, b, plus, squared } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(av.len());
                for (v, ((x, y), use_plus)) in av.chunks(3).zip(bv.chunks(3)).zip(plus).enumerate() {
                    let sign = if *use_plus { T::one() } else { -T::one() };
                    let diff = [x[0] + sign * y[0], x[1] + sign * y[1], x[2] + sign * y[2]];
                    let coef = if *squared {
                        T::lit(2.0) * g[v]
                    } else {
                        let d = node.value.data()[v];
                        if d > T::zero() {
                            g[v] / d
                        } else {
                            T::zero()
                        }
                    };
                    for r in diff {
                        ga.push(coef * r);
                        gb.push(coef * sign * r);
                    }
                }
                if needs(*a) {
                    acc(*a, ga);
                }
                if needs(*b) {
                    acc(*b, gb);
                }
            }
            Op::Exp { x } => acc(*x, zip_map(node.value.data(), g, |y, gi| gi * y)),
            Op::Log { x } => acc(*x, zip_map(self.value(*x).data(), g, |v, gi| gi / v)),
            Op::Affine { x, scale } => acc(*x, g.iter().map(|gi| *gi * *scale).collect()),
            Op::Add { a, b } => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    acc(*a, zip_map(self.value(*b).data(), g, |v, gi| gi * v));
                }
                if needs(*b) {
                    acc(*b, zip_map(self.value(*a).data(), g, |v, gi| gi * v));
                }
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Paste { patch, context, offset } => {
                let (ps, cs) = (self.shape(*patch).to_vec(), self.shape(*context).to_vec());
                if needs(*patch) {
                    let mut gp = vec![T::zero(); self.value(*patch).len()];
                    for_each_patch_row(&ps, &cs, *offset, |p, c, len| {
                        gp[p..p + len].copy_from_slice(&g[c..c + len]);
                    });
                    acc(*patch, gp);
                }
                if needs(*context) {
                    let mut gc = g.to_vec();
                    for_each_patch_row(&ps, &cs, *offset, |_, c, len| {
                        gc[c..c + len].fill(T::zero());
                    });
                    acc(*context, gc);
                }
            }
        }
    }
}

fn zip_map<T: Real>(a: &[T], g: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(g).map(|(x, gi)| f(*x, *gi)).collect()
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += *c),
        slot @ None => *slot = Some(contribution),
    }
}

/// Calls `f(patch_offset, context_offset, run_length)` for every contiguous
/// z-run of a patch placed inside a context cube.
fn for_each_patch_row(ps: &[usize], cs: &[usize], offset: usize, mut f: impl FnMut(usize, usize, usize)) {
    let ch = ps[4];
    let run = ps[3] * ch;
    for b in 0..ps[0] {
        for x in 0..ps[1] {
            for y in 0..ps[2] {
                let p = (((b * ps[1] + x) * ps[2] + y) * ps[3]) * ch;
                let c = (((b * cs[1] + x + offset) * cs[2] + y + offset) * cs[3] + offset) * ch;
                f(p, c, run);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
