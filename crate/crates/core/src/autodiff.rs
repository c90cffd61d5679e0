//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward evaluation appends one node per primitive. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products into every
//! trainable [`Param`] that was registered on the tape. Frozen parameters are
//! recorded as constants and therefore never receive a gradient entry.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_PARAM_KEY: AtomicU64 = AtomicU64::new(1);
static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a learnable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

/// A learnable tensor together with its accumulated gradient.
#[derive(Debug)]
pub struct Param {
    key: ParamKey,
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Clone for Param {
    /// Clones get a fresh key so two live parameters never alias on a tape.
    fn clone(&self) -> Self {
        Self {
            key: ParamKey(NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed)),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            frozen: self.frozen,
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            key: ParamKey(NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds this parameter's entry of `grads` (if any) into `self.grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if let Some(g) = grads.get(self.key) {
            for (acc, v) in self.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }
}

/// Anything that owns a set of parameters.
pub trait Differentiable {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

impl Differentiable for Vec<Param> {
    fn params(&self) -> Vec<&Param> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().collect()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn contains(&self, key: ParamKey) -> bool {
        self.map.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.map.keys().copied()
    }

    /// Multiplies every entry by `factor`.
    pub fn scale(&mut self, factor: f32) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Entrywise sum; keys present in only one side are carried over.
    pub fn merge(&mut self, other: Gradients) {
        for (k, t) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    self.map.insert(k, t);
                }
            }
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        let mut keys: Vec<_> = self.map.keys().collect();
        keys.sort();
        keys.iter()
            .flat_map(|k| self.map[k].data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// A primitive with a hand-written vector-Jacobian product.
///
/// `backward` receives the input values, the forward output and the upstream
/// gradient, and must add its contribution into each `grad_inputs[i]` that is
/// `Some` (inputs that need no gradient are passed as `None`).
pub trait Primitive {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f32],
        grad_inputs: &mut [Option<&mut [f32]>],
    );
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f32),
    Shift(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Concat(Vec<Var>),
    Columns { src: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Gather(Var, Box<GatherSpec>),
    Custom(Vec<Var>, Box<dyn Primitive>),
}

/// Constant sparse linear map used by [`Tape::gather`]:
/// `out[p, :] = Σ_k weights[p·K + k] · src[indices[p·K + k], :]`.
#[derive(Clone, Debug)]
pub struct GatherSpec {
    pub rows: usize,
    pub taps: usize,
    pub indices: Vec<u32>,
    pub weights: Vec<f32>,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    /// `f64` shadow of single-element results built from sums.
    wide: Option<f64>,
}

/// Records primitive evaluations for one forward/backward cycle.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    leaves: Vec<(ParamKey, usize)>,
    leaf_index: HashMap<ParamKey, usize>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `softplus(x)` and its derivative `sigmoid(x)` from one exponential.
#[inline]
pub(crate) fn softplus_with_slope(x: f32) -> (f32, f32) {
    if x > 20.0 {
        (x, 1.0)
    } else {
        let e = x.exp();
        if x < -20.0 {
            (e, e)
        } else {
            (e.ln_1p(), e / (1.0 + e))
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: Vec::new(),
            leaf_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            wide: None,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    /// Registers a parameter. Frozen parameters become constants.
    pub fn param(&mut self, p: &'a Param) -> Var {
        if let Some(&id) = self.leaf_index.get(&p.key) {
            return Var { id, tape: self.id };
        }
        let trainable = !p.frozen;
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, trainable);
        self.leaf_index.insert(p.key, v.id);
        if trainable {
            self.leaves.push((p.key, v.id));
        }
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite("constant", &t)?;
        Ok(self.push(Cow::Owned(t), Op::Leaf, false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        check_finite(op_name, &t)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(t), op, needs))
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: Var,
        f: impl Fn(f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let data = x.data().iter().map(|&p| f(p)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        check_finite(op_name, &t)?;
        let needs = self.needs(a);
        Ok(self.push(Cow::Owned(t), op, needs))
    }

    fn widen(&mut self, v: Var, f: impl FnOnce(&Self) -> Option<f64>) -> Var {
        if self.nodes[v.id].value.numel() == 1 {
            self.nodes[v.id].wide = f(self);
        }
        v
    }

    fn wide_parts(&self, a: Var, b: Var) -> Option<(f64, f64)> {
        let (x, y) = (&self.nodes[a.id], &self.nodes[b.id]);
        if x.wide.is_none() && y.wide.is_none() {
            return None;
        }
        Some((self.scalar_f64(a).ok()?, self.scalar_f64(b).ok()?))
    }

    /// Single-element value, using the `f64` shadow kept for reductions when
    /// available.
    pub fn scalar_f64(&self, v: Var) -> Result<f64> {
        let id = self.check(v)?;
        match self.nodes[id].wide {
            Some(w) => Ok(w),
            None => Ok(f64::from(self.nodes[id].value.item()?)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))?;
        Ok(self.widen(v, |t| t.wide_parts(a, b).map(|(x, y)| x + y)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))?;
        Ok(self.widen(v, |t| t.wide_parts(a, b).map(|(x, y)| x - y)))
    }

    /// Elementwise product. One operand may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 1 && na != 1 {
            return self.mul_scalar(a, b);
        }
        if na == 1 && nb != 1 {
            return self.mul_scalar(b, a);
        }
        let v = self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))?;
        Ok(self.widen(v, |t| t.wide_parts(a, b).map(|(x, y)| x * y)))
    }

    fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.value(s).data()[0];
        let x = self.value(a);
        let t = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&p| p * k).collect(),
        )?;
        check_finite("mul", &t)?;
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Cow::Owned(t), Op::MulScalar(a, s), needs))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, k: f32) -> Result<Var> {
        let v = self.unary("scale", a, |p| p * k, Op::Scale(a, k))?;
        Ok(self.widen(v, |t| t.nodes[a.id].wide.map(|x| x * f64::from(k))))
    }

    /// Addition of a constant.
    pub fn shift(&mut self, a: Var, k: f32) -> Result<Var> {
        let v = self.unary("shift", a, |p| p + k, Op::Shift(a))?;
        Ok(self.widen(v, |t| t.nodes[a.id].wide.map(|x| x + f64::from(k))))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f32::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |p| p.max(0.0), Op::Relu(a))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        let (m, k, n) = match (x.shape(), y.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0f32; m * n];
        let (xd, yd) = (x.data(), y.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = xd[i * k + p];
                let brow = &yd[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += s * w;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &t)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(t), Op::MatMul(a, b), needs))
    }

    /// Adds the row vector `row` (`[n]`) to every row of `a` (`[m, n]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let (x, r) = (self.value(a), self.value(row));
        let n = r.numel();
        if x.shape().len() != 2 || x.shape()[1] != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        check_finite("add_row", &t)?;
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Cow::Owned(t), Op::AddRow(a, row), needs))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let mut rows = None;
        let mut cols = 0;
        for &p in parts {
            self.check(p)?;
            match self.shape(p) {
                [r, c] => {
                    if *rows.get_or_insert(*r) != *r {
                        return Err(Error::shape("concat", "row counts differ"));
                    }
                    cols += c;
                }
                s => return Err(Error::shape("concat", format!("operand {s:?} is not 2-D"))),
            }
        }
        let rows = rows.unwrap_or(0);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Cow::Owned(t), Op::Concat(parts.to_vec()), needs))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let (rows, cols) = match x.shape() {
            [r, c] if start + len <= *c => (*r, *c),
            s => {
                return Err(Error::shape(
                    "columns",
                    format!("{start}..{} of {s:?}", start + len),
                ))
            }
        };
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a);
        let t = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(Cow::Owned(t), Op::Columns { src: a, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Cow::Owned(t), Op::Reshape(a), needs))
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.value(a).data().iter().map(|&v| f64::from(v)).sum();
        let t = Tensor::scalar(s as f32);
        check_finite("sum", &t)?;
        let needs = self.needs(a);
        let v = self.push(Cow::Owned(t), Op::Sum(a), needs);
        self.nodes[v.id].wide = Some(s);
        Ok(v)
    }

    /// Weighted row gather from a 2-D source (see [`GatherSpec`]).
    pub fn gather(&mut self, src: Var, spec: GatherSpec) -> Result<Var> {
        self.check(src)?;
        let s = self.value(src);
        let (n, f) = match s.shape() {
            [n, f] => (*n, *f),
            sh => return Err(Error::shape("gather", format!("source {sh:?} is not 2-D"))),
        };
        if spec.indices.len() != spec.rows * spec.taps || spec.weights.len() != spec.indices.len()
        {
            return Err(Error::shape("gather", "index/weight length mismatch"));
        }
        if let Some(&bad) = spec.indices.iter().find(|&&i| i as usize >= n) {
            return Err(Error::shape("gather", format!("index {bad} >= {n}")));
        }
        let mut out = vec![0.0f32; spec.rows * f];
        let sd = s.data();
        for p in 0..spec.rows {
            let row = &mut out[p * f..(p + 1) * f];
            for k in 0..spec.taps {
                let j = spec.indices[p * spec.taps + k] as usize;
                let w = spec.weights[p * spec.taps + k];
                for (o, &v) in row.iter_mut().zip(&sd[j * f..(j + 1) * f]) {
                    *o += w * v;
                }
            }
        }
        let t = Tensor::new(vec![spec.rows, f], out)?;
        check_finite("gather", &t)?;
        let needs = self.needs(src);
        Ok(self.push(Cow::Owned(t), Op::Gather(src, Box::new(spec)), needs))
    }

    /// Records a custom primitive whose forward value was computed by the
    /// caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        primitive: Box<dyn Primitive>,
    ) -> Result<Var> {
        for &i in inputs {
            self.check(i)?;
        }
        check_finite(primitive.name(), &output)?;
        let needs = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(
            Cow::Owned(output),
            Op::Custom(inputs.to_vec(), primitive),
            needs,
        ))
    }

    /// Gradient of a scalar output with respect to every trainable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let id = self.check(output)?;
        let shape = self.nodes[id].value.shape();
        if self.nodes[id].value.numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.vjp(output, &Tensor::full(shape, 1.0))
    }

    /// Vector-Jacobian product of `output` with the cotangent `seed`.
    pub fn vjp(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let id = self.check(output)?;
        if self.nodes[id].value.shape() != seed.shape() {
            return Err(Error::shape(
                "vjp",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    self.nodes[id].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=id).map(|_| None).collect();
        if self.nodes[id].needs_grad {
            grads[id] = Some(seed.data().to_vec());
        }
        for i in (0..=id).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            // Leaves keep their gradient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut map = HashMap::with_capacity(self.leaves.len());
        for &(key, node) in &self.leaves {
            let value = &self.nodes[node].value;
            let data = match grads.get_mut(node).and_then(Option::take) {
                Some(g) => g,
                None => vec![0.0; value.numel()],
            };
            map.insert(key, Tensor::new(value.shape().to_vec(), data)?);
        }
        Ok(Gradients { map })
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.id].needs_grad {
                return;
            }
            let n = self.nodes[v.id].value.numel();
            let slot = grads[v.id].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * x[j];
                    }
                });
            }
            Op::MulScalar(a, k) => {
                let x = self.value(*a).data();
                let kv = self.value(*k).data()[0];
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * kv));
                acc(*k, &mut |s| {
                    s[0] += x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| f64::from(x) * f64::from(g))
                        .sum::<f64>() as f32;
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
            }
            Op::Shift(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * sigmoid(x[j]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        if x[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = y.shape()[1];
                let (xd, yd) = (x.data(), y.data());
                // dA = G · Bᵀ
                acc(*a, &mut |s| {
                    let mut bt = vec![0.0f32; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = yd[p * n + j];
                        }
                    }
                    for i in 0..m {
                        let srow = &mut s[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for (d, &b) in srow.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                *d += gv * b;
                            }
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a = xd[i * k + p];
                            for (d, &gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let n = self.value(*row).numel();
                acc(*row, &mut |s| {
                    let mut sums = vec![0.0f64; n];
                    for chunk in g.chunks(n) {
                        for (acc, &v) in sums.iter_mut().zip(chunk) {
                            *acc += f64::from(v);
                        }
                    }
                    for (d, v) in s.iter_mut().zip(sums) {
                        *d += v as f32;
                    }
                });
            }
            Op::Concat(parts) => {
                let cols = out.shape()[1];
                let rows = out.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    acc(p, &mut |s| {
                        for r in 0..rows {
                            for j in 0..c {
                                s[r * c + j] += g[r * cols + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Columns { src, start } => {
                let len = out.shape()[1];
                let cols = self.value(*src).shape()[1];
                let start = *start;
                acc(*src, &mut |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for (j, &v) in grow.iter().enumerate() {
                            s[r * cols + start + j] += v;
                        }
                    }
                });
            }
            Op::Gather(src, spec) => {
                let f = out.shape()[1];
                acc(*src, &mut |s| {
                    for p in 0..spec.rows {
                        let grow = &g[p * f..(p + 1) * f];
                        for k in 0..spec.taps {
                            let j = spec.indices[p * spec.taps + k] as usize;
                            let w = spec.weights[p * spec.taps + k];
                            for (d, &gv) in s[j * f..(j + 1) * f].iter_mut().zip(grow) {
                                *d += w * gv;
                            }
                        }
                    }
                });
            }
            Op::Custom(inputs, prim) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut bufs: Vec<Option<Vec<f32>>> = inputs
                    .iter()
                    .map(|&v| {
                        self.nodes[v.id].needs_grad.then(|| {
                            grads[v.id]
                                .take()
                                .unwrap_or_else(|| vec![0.0; self.nodes[v.id].value.numel()])
                        })
                    })
                    .collect();
                // The same variable may appear twice among the inputs; route
                // every occurrence into the first buffer.
                let mut alias: Vec<usize> = (0..inputs.len()).collect();
                for j in 0..inputs.len() {
                    if let Some(first) = (0..j).find(|&q| inputs[q] == inputs[j]) {
                        alias[j] = alias[first];
                    }
                }
                let mut tmp: Vec<Option<Vec<f32>>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        (alias[j] != j && self.nodes[v.id].needs_grad)
                            .then(|| vec![0.0; self.nodes[v.id].value.numel()])
                    })
                    .collect();
                {
                    let mut views: Vec<Option<&mut [f32]>> = Vec::with_capacity(inputs.len());
                    for (b, t) in bufs.iter_mut().zip(tmp.iter_mut()) {
                        views.push(match (b.as_mut(), t.as_mut()) {
                            (_, Some(t)) => Some(t.as_mut_slice()),
                            (Some(b), None) => Some(b.as_mut_slice()),
                            (None, None) => None,
                        });
                    }
                    prim.backward(&values, out, g, &mut views);
                }
                for j in 0..inputs.len() {
                    if let Some(t) = tmp[j].take() {
                        if let Some(b) = bufs[alias[j]].as_mut() {
                            b.iter_mut().zip(t).for_each(|(b, t)| *b += t);
                        }
                    }
                }
                for (j, &v) in inputs.iter().enumerate() {
                    if alias[j] == j {
                        if let Some(b) = bufs[j].take() {
                            grads[v.id] = Some(b);
                        }
                    }
                }
            }
        }
    }
}

/// Options for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f32,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Magnitude below which errors are measured relative to this floor
    /// instead of the gradient itself.
    pub floor: f64,
    /// Entries checked per leaf; `None` checks every entry.
    pub max_entries: Option<usize>,
    /// When set, entries whose forward and backward one-sided differences
    /// disagree by more than this relative amount are counted as kinks (a
    /// non-differentiable point inside the probe window) and left out of
    /// the error.
    pub kink_tolerance: Option<f64>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-6,
            max_entries: None,
            kink_tolerance: None,
            seed: 0,
        }
    }
}

/// Per-leaf comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct LeafReport {
    pub name: String,
    pub checked: usize,
    /// Entries skipped as kinks.
    pub kinks: usize,
    pub max_rel_error: f64,
    /// Entry index, analytic value and numeric value at the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.leaves.iter().map(|l| l.kinks).sum()
    }

    pub fn checked(&self) -> usize {
        self.leaves.iter().map(|l| l.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn evaluate<M, F>(model: &M, f: &F) -> Result<f64>
where
    M: Differentiable,
    F: for<'t> Fn(&'t M, &mut Tape<'t>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    tape.scalar_f64(out)
}

/// Compares `backward` against central finite differences for every
/// trainable parameter of `model`.
///
/// `f` builds the scalar objective on a fresh tape. When
/// `opts.max_entries` is set, the entries with the largest analytic
/// gradients are checked first and the remainder is drawn at random.
pub fn finite_diff_check<M, F>(model: &mut M, opts: &FdOptions, f: F) -> Result<FdReport>
where
    M: Differentiable,
    F: for<'t> Fn(&'t M, &mut Tape<'t>) -> Result<Var>,
{
    finite_diff_check_with(model, opts, &f, |m: &M| evaluate(m, &f))
}

/// As [`finite_diff_check`], but the differences are taken of `reference`,
/// an independent evaluation of the same objective (for example in higher
/// precision).
pub fn finite_diff_check_with<M, F, R>(model: &mut M, opts: &FdOptions, f: F, reference: R) -> Result<FdReport>
where
    M: Differentiable,
    F: for<'t> Fn(&'t M, &mut Tape<'t>) -> Result<Var>,
    R: Fn(&M) -> Result<f64>,
{
    let analytic = {
        let mut tape = Tape::new();
        let out = f(model, &mut tape)?;
        tape.backward(out)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let targets: Vec<(usize, String, Vec<f32>)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.frozen)
        .map(|(i, p)| {
            let g = analytic
                .get(p.key())
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (i, p.name().to_string(), g)
        })
        .collect();

    let mut leaves = Vec::new();
    for (pi, name, grad) in targets {
        let n = grad.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
                let top = k / 2;
                let mut chosen: Vec<usize> = order[..top].to_vec();
                let rest = &order[top..];
                chosen.extend(sample(&mut rng, rest.len(), k - top).into_iter().map(|j| rest[j]));
                chosen
            }
            _ => (0..n).collect(),
        };
        let mut report = LeafReport {
            name,
            checked: entries.len(),
            kinks: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        let base = reference(model)?;
        for j in entries {
            let orig = model.params()[pi].value.data()[j];
            model.params_mut()[pi].value.data_mut()[j] = orig + opts.step;
            let plus = reference(model)?;
            model.params_mut()[pi].value.data_mut()[j] = orig - opts.step;
            let minus = reference(model)?;
            model.params_mut()[pi].value.data_mut()[j] = orig;
            // Use the steps actually representable in f32.
            let hp = f64::from(orig + opts.step) - f64::from(orig);
            let hm = f64::from(orig) - f64::from(orig - opts.step);
            let numeric = (plus - minus) / (hp + hm);
            if let Some(tol) = opts.kink_tolerance {
                let forward = (plus - base) / hp;
                let backward = (base - minus) / hm;
                let scale = forward.abs().max(backward.abs()).max(opts.floor);
                if (forward - backward).abs() / scale > tol {
                    report.kinks += 1;
                    continue;
                }
            }
            let a = f64::from(grad[j]);
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((j, a, numeric));
            }
        }
        leaves.push(report);
    }
    Ok(FdReport {
        leaves,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.constant(t(&[2, 1], &[1., 1.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &t(&[2, 1], &[3., 7.]));
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let e = tape.exp(a).unwrap();
        assert_eq!(tape.value(e), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0)).unwrap();
        let s = tape.sigmoid(a).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let m = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(tape.matmul(m, m).is_err());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(100.0)).unwrap();
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Param::new("x", t(&[3], &[1., 2., 3.]));
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let y = tape.sum(sq).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x.key()).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn frozen_leaf_gets_no_entry() {
        let mut a = Param::new("a", t(&[2], &[1., 2.]));
        a.frozen = true;
        let b = Param::new("b", t(&[2], &[3., 4.]));
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&a), tape.param(&b));
        let p = tape.mul(va, vb).unwrap();
        let y = tape.sum(p).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(!g.contains(a.key()));
        assert_eq!(g.get(b.key()).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let a = Param::new("a", t(&[2], &[1., 2.]));
        let unused = Param::new("u", t(&[2, 2], &[1., 2., 3., 4.]));
        let mut tape = Tape::new();
        let va = tape.param(&a);
        tape.param(&unused);
        let y = tape.sum(va).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused.key()).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn softplus_grad_at_zero() {
        let x = Param::new("x", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.softplus(v).unwrap();
        let y = tape.sum(s).unwrap();
        let g = tape.backward(y).unwrap().get(x.key()).unwrap().item().unwrap();
        // central difference, h = 1e-4, evaluated in f64
        let sp = |x: f64| x.exp().ln_1p();
        let fd = (sp(1e-4) - sp(-1e-4)) / 2e-4;
        assert!((f64::from(g) - fd).abs() < 1e-6);
        assert!((g - 0.5).abs() < 1e-7);
    }

    #[test]
    fn backward_errors() {
        let x = Param::new("x", t(&[2], &[1., 2.]));
        let mut tape = Tape::new();
        let v = tape.param(&x);
        assert!(matches!(tape.backward(v), Err(Error::NotScalar(_))));
        let mut other = Tape::new();
        let w = other.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::NotOnTape)));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut x = Param::new("x", t(&[2], &[1., -1.]));
        for _ in 0..2 {
            let g = {
                let mut tape = Tape::new();
                let v = tape.param(&x);
                let y = tape.sum(v).unwrap();
                tape.backward(y).unwrap()
            };
            x.accumulate(&g);
        }
        assert_eq!(x.grad.data(), &[2., 2.]);
        x.zero_grad();
        assert_eq!(x.grad.data(), &[0., 0.]);
    }

    struct WrongSquare;

    impl Primitive for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }
        fn backward(
            &self,
            inputs: &[&Tensor],
            _output: &Tensor,
            grad_output: &[f32],
            grad_inputs: &mut [Option<&mut [f32]>],
        ) {
            // Deliberately missing the factor 2.
            if let Some(g) = grad_inputs[0].as_deref_mut() {
                for ((d, &x), &go) in g.iter_mut().zip(inputs[0].data()).zip(grad_output) {
                    *d += x * go;
                }
            }
        }
    }

    #[test]
    fn finite_diff_passes_for_polynomial_and_fails_for_wrong_rule() {
        let mut params = vec![
            Param::new("a", t(&[3], &[0.3, -1.2, 2.0])),
            Param::new("b", t(&[2], &[0.5, 0.25])),
        ];
        let opts = FdOptions {
            tolerance: 1e-4,
            ..FdOptions::default()
        };
        let good = finite_diff_check(&mut params, &opts, |m: &Vec<Param>, tape| {
            let a = tape.param(&m[0]);
            let b = tape.param(&m[1]);
            let aa = tape.mul(a, a)?;
            let bb = tape.mul(b, b)?;
            let sa = tape.sum(aa)?;
            let sb = tape.sum(bb)?;
            tape.add(sa, sb)
        })
        .unwrap();
        assert!(good.passed(), "{good:?}");

        let bad = finite_diff_check(&mut params, &opts, |m: &Vec<Param>, tape| {
            let a = tape.param(&m[0]);
            let x = tape.value(a).clone();
            let sq = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * v).collect(),
            )?;
            let y = tape.custom(&[a], sq, Box::new(WrongSquare))?;
            tape.sum(y)
        })
        .unwrap();
        assert!(!bad.passed());
    }
}
