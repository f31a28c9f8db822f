use super::{ParamSet, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSumExp(Var),
    Dot(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Index(Var, usize),
    GatherMean(Var, Vec<Vec<usize>>),
    StackRows(Vec<Var>),
    L2Distance(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape created with [`Tape::no_grad`] only evaluates values; calling
/// [`Tape::backward`] on it is a contract error.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

fn vector_len(shape: &[usize]) -> Option<usize> {
    match shape {
        [n] => Some(*n),
        _ => None,
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn acc_add<T: Real>(dst: &mut Option<Vec<T>>, len: usize, f: impl Fn(usize) -> T) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    for (i, b) in buf.iter_mut().enumerate() {
        *b = *b + f(i);
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if self.record { op } else { Op::Leaf { param: None } };
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!("constant shape {shape:?} with {} values", value.len())));
        }
        Ok(self.push(shape, value, Op::Leaf { param: None }))
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.push(vec![], vec![v], Op::Leaf { param: None })
    }

    /// Binds parameter `index` of `params`. Gradients flow back to it on
    /// [`Tape::backward`] when the tensor requires them.
    pub fn param(&mut self, params: &ParamSet<T>, index: usize) -> Var {
        let t = params.get(index);
        let param = if t.requires_grad() { Some(index) } else { None };
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf { param })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, k), (k2, n)) = match (matrix_dims(sa), matrix_dims(sb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.fill(0.0);
            for p in 0..k {
                let x = av[i * k + p].f64();
                if x == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                for (s, y) in acc.iter_mut().zip(row) {
                    *s += x * y.f64();
                }
            }
            out.extend(acc.iter().map(|&s| T::of(s)));
        }
        debug_assert_eq!(k, k2);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `a [m x k]` times vector `x [k]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        let (m, k) = match (matrix_dims(sa), vector_len(sx)) {
            (Some((m, k)), Some(k2)) if k == k2 => (m, k),
            _ => return Err(shape_err("matvec", sa, sx)),
        };
        let (av, xv) = (self.value(a), self.value(x));
        let out = (0..m)
            .map(|i| T::of(av[i * k..(i + 1) * k].iter().zip(xv).map(|(p, q)| p.f64() * q.f64()).sum()))
            .collect();
        Ok(self.push(vec![m], out, Op::MatVec(a, x)))
    }

    /// Row-vector `x [m]` times `a [m x n]`: a weighted sum of rows.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        let (m, n) = match (vector_len(sx), matrix_dims(sa)) {
            (Some(m2), Some((m, n))) if m == m2 => (m, n),
            _ => return Err(shape_err("vecmat", sx, sa)),
        };
        let (xv, av) = (self.value(x), self.value(a));
        let mut acc = vec![0f64; n];
        for i in 0..m {
            let w = xv[i].f64();
            for (s, y) in acc.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                *s += w * y.f64();
            }
        }
        Ok(self.push(vec![n], acc.into_iter().map(T::of).collect(), Op::VecMat(x, a)))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b [n]` to every row of `a [m x n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, n) = match (matrix_dims(sa), vector_len(sb)) {
            (Some((m, n)), Some(n2)) if n == n2 => (m, n),
            _ => return Err(shape_err("add_bias", sa, sb)),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..m * n).map(|i| av[i] + bv[i % n]).collect();
        Ok(self.push(vec![m, n], out, Op::AddBias(a, b)))
    }

    /// Adds a one-element tensor `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("add_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x + sv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::of(c);
        let out = self.value(a).iter().map(|&x| x * cv).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c))
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let cv = T::of(c);
        let out = self.value(a).iter().map(|&x| x + cv).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Shift(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * s })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = vector_len(self.shape(a)).ok_or_else(|| Error::Shape(format!("softmax needs a vector, got {:?}", self.shape(a))))?;
        let out = softmax_values(self.value(a));
        Ok(self.push(vec![n], out, Op::Softmax(a)))
    }

    /// Stable `log(sum(exp(a)))` over all entries.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Shape("log_sum_exp of an empty tensor".into()));
        }
        let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        let s: f64 = v.iter().map(|x| (x.f64() - max).exp()).sum();
        let out = vec![T::of(max + s.ln())];
        Ok(self.push(vec![], out, Op::LogSumExp(a)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if vector_len(sa).is_none() || sa != sb {
            return Err(shape_err("dot", sa, sb));
        }
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x.f64() * y.f64()).sum();
        Ok(self.push(vec![], vec![T::of(s)], Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x.f64()).sum();
        self.push(vec![], vec![T::of(s)], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s: f64 = self.value(a).iter().map(|x| x.f64()).sum();
        Ok(self.push(vec![], vec![T::of(s / n as f64)], Op::Mean(a)))
    }

    /// Column means of `a [m x n]`, giving `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match matrix_dims(self.shape(a)) {
            Some((m, n)) if m > 0 => (m, n),
            _ => return Err(Error::Shape(format!("mean_rows needs a non-empty matrix, got {:?}", self.shape(a)))),
        };
        let v = self.value(a);
        let out = (0..n)
            .map(|j| T::of((0..m).map(|i| v[i * n + j].f64()).sum::<f64>() / m as f64))
            .collect();
        Ok(self.push(vec![n], out, Op::MeanRows(a)))
    }

    /// Concatenates vectors (or scalars) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() > 1 {
                return Err(Error::Shape(format!("concat needs vectors, got {:?}", self.shape(p))));
            }
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec())))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = vector_len(self.shape(a)).ok_or_else(|| Error::Shape(format!("slice needs a vector, got {:?}", self.shape(a))))?;
        if start + len > n {
            return Err(Error::Shape(format!("slice {start}..{} of length {n}", start + len)));
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push(vec![len], out, Op::Slice(a, start)))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a);
        if i >= v.len() {
            return Err(Error::Shape(format!("index {i} out of {}", v.len())));
        }
        let x = v[i];
        Ok(self.push(vec![], vec![x], Op::Index(a, i)))
    }

    /// Output row `g` is the mean of the rows of `a` listed in `groups[g]`.
    pub fn gather_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(a)).ok_or_else(|| Error::Shape(format!("gather needs a matrix, got {:?}", self.shape(a))))?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(groups.len() * n);
        let mut acc = vec![0f64; n];
        for g in &groups {
            if g.is_empty() || g.iter().any(|&r| r >= m) {
                return Err(Error::Shape(format!("gather group {g:?} invalid for {m} rows")));
            }
            acc.fill(0.0);
            for &r in g {
                for (s, x) in acc.iter_mut().zip(&v[r * n..(r + 1) * n]) {
                    *s += x.f64();
                }
            }
            let inv = 1.0 / g.len() as f64;
            out.extend(acc.iter().map(|&s| T::of(s * inv)));
        }
        let rows = groups.len();
        Ok(self.push(vec![rows, n], out, Op::GatherMean(a, groups)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.gather_mean(a, rows.iter().map(|&r| vec![r]).collect())
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let n = matrix_dims(self.shape(a)).ok_or_else(|| Error::Shape(format!("row needs a matrix, got {:?}", self.shape(a))))?.1;
        let g = self.gather_rows(a, &[r])?;
        // A [1 x n] matrix and an [n] vector share storage layout.
        self.nodes[g.0].shape = vec![n];
        Ok(g)
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let n = match rows.first() {
            Some(&r) => vector_len(self.shape(r)).ok_or_else(|| Error::Shape("stack_rows needs vectors".into()))?,
            None => return Err(Error::Shape("stack_rows of nothing".into())),
        };
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if self.shape(r) != [n] {
                return Err(shape_err("stack_rows", &[n], self.shape(r)));
            }
            out.extend_from_slice(self.value(r));
        }
        let m = rows.len();
        Ok(self.push(vec![m, n], out, Op::StackRows(rows.to_vec())))
    }

    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("l2_distance", self.shape(a), self.shape(b)));
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x.f64() - y.f64()).powi(2))
            .sum();
        Ok(self.push(vec![], vec![T::of(s.sqrt())], Op::L2Distance(a, b)))
    }

    /// Back-propagates from a one-element `loss`, adding `d loss / d p` into the
    /// gradient buffer of every bound parameter that requires gradients.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        if !self.record {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        params.get_mut(*p).accumulate_grad(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = matrix_dims(self.shape(*a)).unwrap();
                    let n = matrix_dims(self.shape(*b)).unwrap().1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let s: f64 = (0..n).map(|j| g[i * n + j].f64() * bv[p * n + j].f64()).sum();
                            da[i * k + p] = T::of(s);
                        }
                    }
                    let mut db = vec![0f64; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p].f64();
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j].f64();
                            }
                        }
                    }
                    acc_add(&mut grads[a.0], m * k, |i| da[i]);
                    acc_add(&mut grads[b.0], k * n, |i| T::of(db[i]));
                }
                Op::MatVec(a, x) => {
                    let (m, k) = matrix_dims(self.shape(*a)).unwrap();
                    let (av, xv) = (self.value(*a), self.value(*x));
                    acc_add(&mut grads[a.0], m * k, |idx| g[idx / k] * xv[idx % k]);
                    let dx: Vec<T> = (0..k)
                        .map(|j| T::of((0..m).map(|i| g[i].f64() * av[i * k + j].f64()).sum()))
                        .collect();
                    acc_add(&mut grads[x.0], k, |j| dx[j]);
                }
                Op::VecMat(x, a) => {
                    let (m, n) = matrix_dims(self.shape(*a)).unwrap();
                    let (xv, av) = (self.value(*x), self.value(*a));
                    let dx: Vec<T> = (0..m)
                        .map(|i| T::of((0..n).map(|j| g[j].f64() * av[i * n + j].f64()).sum()))
                        .collect();
                    acc_add(&mut grads[x.0], m, |i| dx[i]);
                    acc_add(&mut grads[a.0], m * n, |idx| xv[idx / n] * g[idx % n]);
                }
                Op::Add(a, b) => {
                    acc_add(&mut grads[a.0], g.len(), |i| g[i]);
                    acc_add(&mut grads[b.0], g.len(), |i| g[i]);
                }
                Op::Sub(a, b) => {
                    acc_add(&mut grads[a.0], g.len(), |i| g[i]);
                    acc_add(&mut grads[b.0], g.len(), |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc_add(&mut grads[a.0], g.len(), |i| g[i] * bv[i]);
                    acc_add(&mut grads[b.0], g.len(), |i| g[i] * av[i]);
                }
                Op::AddBias(a, b) => {
                    let n = self.value(*b).len();
                    acc_add(&mut grads[a.0], g.len(), |i| g[i]);
                    let m = g.len() / n;
                    acc_add(&mut grads[b.0], n, |j| T::of((0..m).map(|i| g[i * n + j].f64()).sum()));
                }
                Op::AddScalar(a, s) => {
                    acc_add(&mut grads[a.0], g.len(), |i| g[i]);
                    let total = T::of(g.iter().map(|x| x.f64()).sum());
                    acc_add(&mut grads[s.0], 1, |_| total);
                }
                Op::Scale(a, c) => {
                    let c = T::of(*c);
                    acc_add(&mut grads[a.0], g.len(), |i| g[i] * c);
                }
                Op::Shift(a) => acc_add(&mut grads[a.0], g.len(), |i| g[i]),
                Op::LeakyRelu(a, slope) => {
                    let s = T::of(*slope);
                    let av = self.value(*a);
                    acc_add(&mut grads[a.0], g.len(), |i| if av[i] > T::zero() { g[i] } else { g[i] * s });
                }
                Op::Exp(a) => acc_add(&mut grads[a.0], g.len(), |i| g[i] * node.value[i]),
                Op::Log(a) => {
                    let av = self.value(*a);
                    acc_add(&mut grads[a.0], g.len(), |i| g[i] / av[i]);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(p, q)| p.f64() * q.f64()).sum();
                    acc_add(&mut grads[a.0], y.len(), |i| T::of(y[i].f64() * (g[i].f64() - gy)));
                }
                Op::LogSumExp(a) => {
                    let p = softmax_values(self.value(*a));
                    acc_add(&mut grads[a.0], p.len(), |i| g[0] * p[i]);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc_add(&mut grads[a.0], av.len(), |i| g[0] * bv[i]);
                    acc_add(&mut grads[b.0], bv.len(), |i| g[0] * av[i]);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    acc_add(&mut grads[a.0], n, |_| g[0]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let v = g[0] / T::of(n as f64);
                    acc_add(&mut grads[a.0], n, |_| v);
                }
                Op::MeanRows(a) => {
                    let (m, n) = matrix_dims(self.shape(*a)).unwrap();
                    let inv = T::of(1.0 / m as f64);
                    acc_add(&mut grads[a.0], m * n, |idx| g[idx % n] * inv);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        acc_add(&mut grads[p.0], len, |i| g[off + i]);
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).len();
                    let len = g.len();
                    let start = *start;
                    acc_add(&mut grads[a.0], n, |i| if i >= start && i < start + len { g[i - start] } else { T::zero() });
                }
                Op::Index(a, i) => {
                    let n = self.value(*a).len();
                    let i = *i;
                    acc_add(&mut grads[a.0], n, |j| if j == i { g[0] } else { T::zero() });
                }
                Op::GatherMean(a, groups) => {
                    let (m, n) = matrix_dims(self.shape(*a)).unwrap();
                    let buf = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * n]);
                    for (gi, grp) in groups.iter().enumerate() {
                        let inv = T::of(1.0 / grp.len() as f64);
                        for &r in grp {
                            for j in 0..n {
                                buf[r * n + j] = buf[r * n + j] + g[gi * n + j] * inv;
                            }
                        }
                    }
                }
                Op::StackRows(rows) => {
                    let n = g.len() / rows.len();
                    for (ri, r) in rows.iter().enumerate() {
                        acc_add(&mut grads[r.0], n, |j| g[ri * n + j]);
                    }
                }
                Op::L2Distance(a, b) => {
                    let d = node.value[0].f64();
                    if d > 0.0 {
                        let (av, bv) = (self.value(*a), self.value(*b));
                        let c = g[0].f64() / d;
                        let diff: Vec<T> = av.iter().zip(bv).map(|(x, y)| T::of(c * (x.f64() - y.f64()))).collect();
                        acc_add(&mut grads[a.0], diff.len(), |i| diff[i]);
                        acc_add(&mut grads[b.0], diff.len(), |i| -diff[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn softmax_values<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let exps: Vec<f64> = v.iter().map(|x| (x.f64() - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::of(e / s)).collect()
}
