//! Tape-based reverse-mode differentiation over small dense `f64` tensors.
//!
//! Operations append to a [`Tape`] and return [`Var`] handles. `backward`
//! walks the tape once in reverse, accumulating adjoints. Only the shapes the
//! proposal networks need are supported: scalars, vectors and matrix-vector
//! products, with no implicit broadcasting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: Vec::new(), data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|x| f(*x)).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Clamp(Var, f64, f64),
    Index(Var, usize),
    MatVec(Var, Var),
    Affine(Var, Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    MixtureLogDensity { out: Var, zs: Vec<f64>, lo: f64, hi: f64 },
    CategoricalLogMass { out: Var, n: usize, ks: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape)))
    }
}

fn vector_len(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape.as_slice() {
        [n] => Ok(*n),
        s => Err(Error::Shape(format!("{what}: expected a vector, got {s:?}"))),
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Value and gradient (with respect to the packed head) of the summed
/// mixture log density.
fn mixture_terms(o: &[f64], zs: &[f64], lo: f64, hi: f64) -> (f64, Vec<f64>) {
    let k = o.len() / 3;
    let (logits, rest) = o.split_at(k);
    let (mu, raw) = rest.split_at(k);
    let ls: Vec<f64> = raw.iter().map(|l| l.clamp(lo, hi)).collect();
    let inv: Vec<f64> = ls.iter().map(|l| (-l).exp()).collect();
    let w = softmax(logits);
    let lse_a = log_sum_exp(logits);
    let mut value = 0.0;
    let mut grad = vec![0.0; 3 * k];
    let mut comp = vec![0.0; k];
    let mut std = vec![0.0; k];
    for z in zs {
        for j in 0..k {
            std[j] = (z - mu[j]) * inv[j];
            comp[j] = logits[j] - 0.5 * std[j] * std[j] - ls[j];
        }
        let lse = log_sum_exp(&comp);
        value += lse - lse_a;
        for j in 0..k {
            let r = (comp[j] - lse).exp();
            grad[j] += r - w[j];
            grad[k + j] += r * std[j] * inv[j];
            if raw[j] > lo && raw[j] < hi {
                grad[2 * k + j] += r * (std[j] * std[j] - 1.0);
            }
        }
    }
    (value, grad)
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters. Constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let out = x.zip(y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let out = x.zip(y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let out = x.zip(y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a constant (non-differentiated) tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let x = self.value(a);
        same_shape(x, c, "add_const")?;
        let out = x.zip(c, |p, q| p + q);
        Ok(self.push(out, Op::AddConst(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn softmax_logits(&mut self, a: Var) -> Result<Var> {
        vector_len(self.value(a), "softmax")?;
        let out = Tensor::vector(softmax(&self.value(a).data));
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        vector_len(self.value(a), "logsumexp")?;
        let out = Tensor::scalar(crate::distributions::log_sum_exp(&self.value(a).data));
        Ok(self.push(out, Op::LogSumExp(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(out, Op::Sum(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            vector_len(self.value(*p), "concat")?;
            data.extend_from_slice(&self.value(*p).data);
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = vector_len(self.value(a), "slice")?;
        if start + len > n {
            return Err(Error::Shape(format!("slice {start}..{} of length {n}", start + len)));
        }
        let out = Tensor::vector(self.value(a).data[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(a, start)))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Element `i` of a vector, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = vector_len(self.value(a), "index")?;
        if i >= n {
            return Err(Error::Shape(format!("index {i} of length {n}")));
        }
        let out = Tensor::scalar(self.value(a).data[i]);
        Ok(self.push(out, Op::Index(a, i)))
    }

    fn matvec_value(&self, w: Var, x: Var) -> Result<Tensor> {
        let (wt, xt) = (self.value(w), self.value(x));
        let (m, n) = match wt.shape.as_slice() {
            [m, n] => (*m, *n),
            s => return Err(Error::Shape(format!("matvec: weight shape {s:?}"))),
        };
        if vector_len(xt, "matvec")? != n {
            return Err(Error::Shape(format!("matvec: {m}x{n} times {:?}", xt.shape)));
        }
        let data = (0..m)
            .map(|i| wt.data[i * n..(i + 1) * n].iter().zip(&xt.data).map(|(a, b)| a * b).sum())
            .collect();
        Ok(Tensor::vector(data))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = self.matvec_value(w, x)?;
        Ok(self.push(out, Op::MatVec(w, x)))
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let mut out = self.matvec_value(w, x)?;
        same_shape(&out, self.value(b), "affine bias")?;
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Affine(w, x, b)))
    }

    /// `sum_j c_j v_j` over equally shaped vectors; an empty sum is the zero
    /// vector of length `dim`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)], dim: usize) -> Result<Var> {
        let mut out = Tensor::zeros(&[dim]);
        for (v, c) in terms {
            let t = self.value(*v);
            same_shape(&out, t, "weighted_sum")?;
            out.data.iter_mut().zip(&t.data).for_each(|(o, x)| *o += c * x);
        }
        Ok(self.push(out, Op::WeightedSum(terms.to_vec())))
    }

    /// `sum_i log sum_k w_k N(z_i; mu_k, exp(l_k))` where `out` packs
    /// `[logits; mu; l]` (length `3K`), `w = softmax(logits)` and each `l_k`
    /// is clamped to `[lo, hi]`. The Gaussian normalizer `ln sqrt(2 pi)` is
    /// not included.
    pub fn mixture_log_density(&mut self, out: Var, zs: &[f64], lo: f64, hi: f64) -> Result<Var> {
        let o = self.value(out);
        let len = vector_len(o, "mixture_log_density")?;
        if len == 0 || len % 3 != 0 {
            return Err(Error::Shape(format!("mixture head of length {len}")));
        }
        let v = mixture_terms(&o.data, zs, lo, hi).0;
        Ok(self.push(
            Tensor::scalar(v),
            Op::MixtureLogDensity { out, zs: zs.to_vec(), lo, hi },
        ))
    }

    /// `sum_i (out[k_i] - logsumexp(out[..n]))`.
    pub fn categorical_log_mass(&mut self, out: Var, n: usize, ks: &[usize]) -> Result<Var> {
        let o = self.value(out);
        let len = vector_len(o, "categorical_log_mass")?;
        if n == 0 || n > len || ks.iter().any(|k| *k >= n) {
            return Err(Error::Shape(format!("categorical of size {n} over {len} scores")));
        }
        let lse = log_sum_exp(&o.data[..n]);
        let v = ks.iter().map(|k| o.data[*k] - lse).sum();
        Ok(self.push(Tensor::scalar(v), Op::CategoricalLogMass { out, n, ks: ks.to_vec() }))
    }

    /// Adjoints of the scalar `loss` with respect to every tape entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(self.value(loss).map(|_| 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            let mut acc = |v: Var, d: Tensor| match &mut grads[v.0] {
                Some(t) => t.add_assign(&d),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip(self.value(*b), |p, q| p * q));
                    acc(*b, g.zip(self.value(*a), |p, q| p * q));
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
                Op::AddConst(a) => acc(*a, g.clone()),
                Op::Tanh(a) => acc(*a, g.zip(y, |p, t| p * (1.0 - t * t))),
                Op::Relu(a) => {
                    acc(*a, g.zip(self.value(*a), |p, x| if x > 0.0 { p } else { 0.0 }))
                }
                Op::Exp(a) => acc(*a, g.zip(y, |p, e| p * e)),
                Op::Log(a) => acc(*a, g.zip(self.value(*a), |p, x| p / x)),
                Op::Square(a) => acc(*a, g.zip(self.value(*a), |p, x| 2.0 * p * x)),
                Op::Softmax(a) => {
                    let dot: f64 = g.data.iter().zip(&y.data).map(|(p, s)| p * s).sum();
                    acc(*a, g.zip(y, |p, s| s * (p - dot)));
                }
                Op::LogSumExp(a) => {
                    let s = softmax(&self.value(*a).data);
                    let gi = g.item();
                    acc(*a, Tensor::vector(s.into_iter().map(|v| gi * v).collect()));
                }
                Op::Sum(a) => {
                    let gi = g.item();
                    acc(*a, self.value(*a).map(|_| gi));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        acc(*p, Tensor::vector(g.data[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let mut d = Tensor::zeros(&self.value(*a).shape);
                    d.data[*start..*start + g.len()].copy_from_slice(&g.data);
                    acc(*a, d);
                }
                Op::Clamp(a, lo, hi) => acc(
                    *a,
                    g.zip(self.value(*a), |p, x| if x > *lo && x < *hi { p } else { 0.0 }),
                ),
                Op::Index(a, i) => {
                    let mut d = Tensor::zeros(&self.value(*a).shape);
                    d.data[*i] = g.item();
                    acc(*a, d);
                }
                Op::MatVec(w, x) | Op::Affine(w, x, _) => {
                    let (wt, xt) = (self.value(*w), self.value(*x));
                    let (m, n) = (wt.shape[0], wt.shape[1]);
                    let mut gw = Tensor::zeros(&wt.shape);
                    let mut gx = Tensor::zeros(&xt.shape);
                    for r in 0..m {
                        let gr = g.data[r];
                        let row = &wt.data[r * n..(r + 1) * n];
                        let grow = &mut gw.data[r * n..(r + 1) * n];
                        for ((gwc, (gxc, wc)), xc) in grow.iter_mut().zip(gx.data.iter_mut().zip(row)).zip(&xt.data) {
                            *gwc = gr * xc;
                            *gxc += wc * gr;
                        }
                    }
                    acc(*w, gw);
                    acc(*x, gx);
                    if let Op::Affine(_, _, b) = &node.op {
                        acc(*b, g.clone());
                    }
                }
                Op::WeightedSum(terms) => {
                    for (v, c) in terms {
                        acc(*v, g.map(|x| c * x));
                    }
                }
                Op::MixtureLogDensity { out, zs, lo, hi } => {
                    let d = mixture_terms(&self.value(*out).data, zs, *lo, *hi).1;
                    let gi = g.item();
                    acc(*out, Tensor::vector(d.into_iter().map(|x| gi * x).collect()));
                }
                Op::CategoricalLogMass { out, n, ks } => {
                    let o = self.value(*out);
                    let s = softmax(&o.data[..*n]);
                    let gi = g.item();
                    let mut d = vec![0.0; o.len()];
                    for (dk, sk) in d.iter_mut().zip(&s) {
                        *dk = -(ks.len() as f64) * sk * gi;
                    }
                    for k in ks {
                        d[*k] += gi;
                    }
                    acc(*out, Tensor::vector(d));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zero when the loss does not depend on it.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Tensor::zeros(&tape.value(v).shape))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self { cfg, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            same_shape(p, g, "adam grad")?;
            same_shape(p, m, "adam moment")?;
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Largest relative disagreement between reverse-mode gradients of the
/// scalar `f` and central differences, over every entry of every input.
/// Magnitudes below `1e-3` are compared on that absolute scale, where
/// rounding in the difference quotient dominates.
pub fn gradient_error(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let eval = |inp: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inp.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar(o))
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut shifted = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(&tape, vars[k]);
        for i in 0..x.len() {
            shifted[k].data[i] = x.data[i] + h;
            let up = eval(&shifted)?;
            shifted[k].data[i] = x.data[i] - h;
            let down = eval(&shifted)?;
            shifted[k].data[i] = x.data[i];
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_leaf(t: &mut Tape, xs: &[f64]) -> Var {
        t.leaf(Tensor::vector(xs.to_vec()))
    }

    #[test]
    fn primitive_reference_values() {
        let mut t = Tape::new();
        let v = vec_leaf(&mut t, &[0.0, 0.0]);
        let l = t.logsumexp(v).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let z = vec_leaf(&mut t, &[0.0, 0.0, 0.0]);
        let s = t.softmax_logits(z).unwrap();
        for p in &t.value(s).data {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.tanh(x);
        assert_eq!(t.scalar(y), 0.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(&t, x).item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        assert_eq!(t.backward(y).unwrap().get(&t, x).item(), 6.0);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut t = Tape::new();
        let v = vec_leaf(&mut t, &[0.3, -1.2, 2.0]);
        let l = t.logsumexp(v).unwrap();
        let g = t.backward(l).unwrap().get(&t, v);
        let expected = softmax(&[0.3, -1.2, 2.0]);
        for (a, b) in g.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        let b = vec_leaf(&mut t, &[5.0, 6.0]);
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(&t, b).data, vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        let b = vec_leaf(&mut t, &[1.0]);
        assert!(t.add(a, b).is_err());
        let w = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(t.matvec(w, a).is_err());
        assert!(t.slice(a, 1, 2).is_err());
    }

    fn check_gradients(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let err = gradient_error(inputs, |t, v| Ok(f(t, v))).unwrap();
        assert!(err < 1e-4, "relative gradient error {err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let a = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let b = Tensor::vector(vec![-0.2, 0.5, 0.9]);
        let w = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.25, 0.6, 0.05, -0.3]).unwrap();
        let bias = Tensor::vector(vec![0.2, -0.1]);
        check_gradients(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let e = t.exp(m);
            let l = t.log(e);
            let sq = t.square(l);
            let th = t.tanh(sq);
            let sc = t.scale(th, -2.5);
            t.sum(sc)
        });
        check_gradients(&[a.clone(), w.clone(), bias.clone()], |t, v| {
            let y = t.affine(v[1], v[0], v[2]).unwrap();
            let r = t.relu(y);
            let z = t.matvec(v[1], v[0]).unwrap();
            let c = t.concat(&[r, z, v[0]]).unwrap();
            let sm = t.softmax_logits(c).unwrap();
            let sl = t.slice(sm, 1, 3).unwrap();
            let cl = t.clamp(sl, 0.0, 0.5);
            let lse = t.logsumexp(cl).unwrap();
            let i = t.index(c, 4).unwrap();
            let out = t.add(lse, i).unwrap();
            t.square(out)
        });
        check_gradients(&[a, b], |t, v| {
            let ws = t.weighted_sum(&[(v[0], 0.5), (v[1], -1.5), (v[0], 0.25)], 3).unwrap();
            let k = t.add_const(ws, &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
            let l = t.logsumexp(k).unwrap();
            t.scale(l, 3.0)
        });
    }

    #[test]
    fn fused_mixture_matches_finite_differences_and_composition() {
        let head = Tensor::vector(vec![0.2, -0.4, 0.1, 0.5, -1.0, 0.3, -0.2, 0.4, -0.6]);
        let zs = [0.3, -1.7, 2.2, 0.0];
        check_gradients(std::slice::from_ref(&head), |t, v| t.mixture_log_density(v[0], &zs, -7.0, 4.0).unwrap());
        let mut t = Tape::new();
        let o = t.leaf(head.clone());
        let fused = t.mixture_log_density(o, &zs, -7.0, 4.0).unwrap();
        let mut expected = 0.0;
        let d = &head.data;
        let lse_a = log_sum_exp(&d[..3]);
        for z in zs {
            let comp: Vec<f64> = (0..3)
                .map(|k| d[k] - 0.5 * ((z - d[3 + k]) / d[6 + k].exp()).powi(2) - d[6 + k])
                .collect();
            expected += log_sum_exp(&comp) - lse_a;
        }
        assert!((t.scalar(fused) - expected).abs() < 1e-12);
    }

    #[test]
    fn fused_mixture_clamps_log_sd() {
        let head = Tensor::vector(vec![0.0, 0.0, 9.0]);
        let mut t = Tape::new();
        let o = t.leaf(head);
        let v = t.mixture_log_density(o, &[1.0], -7.0, 4.0).unwrap();
        assert!((t.scalar(v) - (-0.5 * (-4.0f64).exp().powi(2) - 4.0)).abs() < 1e-12);
        let g = t.backward(v).unwrap().get(&t, o);
        assert_eq!(g.data[2], 0.0);
    }

    #[test]
    fn fused_categorical_matches_finite_differences() {
        let head = Tensor::vector(vec![0.2, -0.4, 1.1, 0.7]);
        check_gradients(std::slice::from_ref(&head), |t, v| t.categorical_log_mass(v[0], 3, &[0, 2, 2]).unwrap());
        let mut t = Tape::new();
        let o = t.leaf(head);
        let v = t.categorical_log_mass(o, 2, &[0, 1]).unwrap();
        assert!((t.scalar(v) - (0.2 - 0.4 - 2.0 * log_sum_exp(&[0.2, -0.4]))).abs() < 1e-12);
        assert!(t.categorical_log_mass(o, 2, &[2]).is_err());
        assert!(t.categorical_log_mass(o, 5, &[0]).is_err());
    }

    #[test]
    fn empty_weighted_sum_is_zero() {
        let mut t = Tape::new();
        let z = t.weighted_sum(&[], 4).unwrap();
        assert_eq!(t.value(z).data, vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in prop::collection::vec(-2.0f64..2.0, 3)) {
            let grad_of = |which: u8| {
                let mut t = Tape::new();
                let v = t.leaf(Tensor::vector(x.clone()));
                let f = t.logsumexp(v).unwrap();
                let sq = t.square(v);
                let g = t.sum(sq);
                let out = match which {
                    0 => f,
                    1 => g,
                    _ => {
                        let fa = t.scale(f, a);
                        let gb = t.scale(g, b);
                        t.add(fa, gb).unwrap()
                    }
                };
                t.backward(out).unwrap().get(&t, v).data
            };
            let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
            for i in 0..3 {
                prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(p[0].data, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = AdamConfig::default();
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![Tensor::vector(vec![0.0; 3])];
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &[Tensor::vector(g.to_vec())]).unwrap();
        for (pi, gi) in p[0].data.iter().zip(g) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig::default();
        let mut p = vec![Tensor::scalar(0.0)];
        let mut adam = Adam::new(cfg, &p);
        let mut prev = 0.0;
        for _ in 0..1000 {
            adam.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
            let step = (p[0].item() - prev).abs();
            prev = p[0].item();
            assert!((step - cfg.lr).abs() <= 0.01 * cfg.lr, "{step}");
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![Tensor::vector(vec![0.0; 2])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::vector(vec![0.0; 3])]).is_err());
    }
}
