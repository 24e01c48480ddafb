//! A small dense-tensor tape with reverse-mode differentiation.
//!
//! Every operation on a [`Graph`] evaluates eagerly and records itself; the
//! recording order is a topological order, so [`Graph::backward`] is a single
//! reverse sweep. Only the primitives the networks and losses need are
//! provided. Shapes must match exactly; the one broadcast is the bias row of
//! [`Graph::linear`].

use crate::error::{Error, Result};
use crate::geom::{self, GravityLine, Point3};

/// Row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn axpy(&mut self, alpha: f64, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

struct Neighbor {
    index: usize,
    pos: Point3,
    raw_weight: f64,
    dist: f64,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Unary { x: Var, act: Activation },
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    RepeatRows { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    Square { x: Var },
    Clamp { x: Var, lo: f64, hi: f64, inward: bool },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    Column { x: Var, col: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Interpolate { field: Var, queries: Var, neighbors: Vec<Vec<Neighbor>>, eps: f64 },
    SoftSelect { values: Var, idx: Vec<usize>, positions: Vec<Point3>, probs: Vec<f64>, temp: f64 },
    LineDistance { p: Var, origin: Point3, direction: Point3 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of eagerly evaluated operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// The gradient for `v`, or zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// `c = a(m x k) * b(k x n) + beta * c`, with optional transposes on the
/// stored operands (`a` stored as `k x m` when `ta`, `b` as `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward {}", op_name(&op))));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Row-wise affine map `x * w + bias`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, a) = self.matrix_dims(x, "linear input")?;
        let (wa, wb) = self.matrix_dims(w, "linear weight")?;
        if a != wa || self.shape(b) != [wb] {
            return Err(Error::Shape(format!(
                "linear: x {:?}, w {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let bias = &self.value(b).data;
        let mut out = Vec::with_capacity(n * wb);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(n, a, wb, &self.value(x).data, false, &self.value(w).data, false, 1.0, &mut out);
        self.push(Tensor { shape: vec![n, wb], data: out }, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, 0.0, &mut out);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, &[a, b])
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(x);
        }
        let f: fn(f64) -> f64 = match act {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
            Activation::Identity => unreachable!(),
        };
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, Op::Unary { x, act }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Tanh)
    }

    /// Column-wise max over the point axis; `N x c -> [c]`. The gradient goes
    /// to the first maximizing row.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "max pool input")?;
        if n == 0 {
            return Err(Error::Empty("max pool over zero points"));
        }
        let src = &self.value(x).data;
        let mut best = src[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..n {
            let row = &src[i * c..(i + 1) * c];
            for j in 0..c {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        self.push(Tensor::vector(best), Op::MaxPool { x, argmax }, &[x])
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.matrix_dims(a, "concat lhs")?;
        let (nb, cb) = self.matrix_dims(b, "concat rhs")?;
        if na != nb {
            return Err(Error::Shape(format!("concat: {na} rows vs {nb} rows")));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(na * (ca + cb));
        for i in 0..na {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(Tensor { shape: vec![na, ca + cb], data: out }, Op::Concat { a, b }, &[a, b])
    }

    /// Replicates a `[c]` vector into `n x c`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let c = match self.shape(x) {
            [c] => *c,
            s => return Err(Error::Shape(format!("repeat_rows needs a vector, got {s:?}"))),
        };
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        self.push(Tensor { shape: vec![n, c], data: out }, Op::RepeatRows { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", src.shape)));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: src.data.clone(),
        };
        self.push(value, Op::Reshape { x }, &[x])
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (av, bv) = (self.value(a), self.value(b));
        Ok(Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul { a, b }, &[a, b])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(x);
        Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.map(x, |v| v * s);
        self.push(v, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |v| v + c);
        self.push(v, Op::AddScalar { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |v| v * v);
        self.push(v, Op::Square { x }, &[x])
    }

    /// Elementwise clamp. The subgradient is 1 strictly inside or on the
    /// bounds and 0 outside them.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.map(x, |v| v.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi, inward: false }, &[x])
    }

    /// Clamp whose backward pass also lets the gradient through outside the
    /// bounds when a descent step would move the value back inside. The
    /// forward value is the same as [`Graph::clamp`]. Without this, a value
    /// pushed past a bound by its own parameters can never recover.
    pub fn clamp_inward(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.map(x, |v| v.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi, inward: true }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `sum_i w_i x_i` over the flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s = self.value(x).data.iter().zip(&weights).map(|(v, w)| v * w).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Selects rows (or entries, for vectors) in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (n, c) = match src.shape.as_slice() {
            [n] => (*n, 1),
            [n, c] => (*n, *c),
            s => return Err(Error::Shape(format!("gather_rows on {s:?}"))),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of {n} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src.data[i * c..(i + 1) * c]);
        }
        let shape = if src.shape.len() == 1 { vec![idx.len()] } else { vec![idx.len(), c] };
        self.push(Tensor { shape, data: out }, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Column `col` of an `N x c` matrix as an `[N]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "column source")?;
        if col >= c {
            return Err(Error::Shape(format!("column {col} of {c}")));
        }
        let src = &self.value(x).data;
        let out = (0..n).map(|i| src[i * c + col]).collect();
        self.push(Tensor::vector(out), Op::Column { x, col }, &[x])
    }

    /// Mean over rows of `-log softmax(logits_i)[target_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "logits")?;
        if targets.len() != n {
            return Err(Error::LengthMismatch {
                what: "cross-entropy targets",
                expected: n,
                got: targets.len(),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!("class {t} out of {c}")));
        }
        if n == 0 {
            return Err(Error::Empty("cross-entropy over zero rows"));
        }
        let src = &self.value(logits).data;
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Inverse-distance interpolation of `field` (`[N]`, defined on `points`)
    /// at each row of `queries` (`M x 3`) from its `k` nearest points.
    /// Differentiable in both the field values and the query positions.
    pub fn interpolate(&mut self, field: Var, queries: Var, points: &[Point3], k: usize, eps: f64) -> Result<Var> {
        if self.shape(field) != [points.len()] {
            return Err(Error::Shape(format!(
                "interpolated field {:?} vs {} points",
                self.shape(field),
                points.len()
            )));
        }
        let (m, d) = self.matrix_dims(queries, "queries")?;
        if d != 3 {
            return Err(Error::Shape(format!("queries must be M x 3, got M x {d}")));
        }
        let f = &self.value(field).data;
        let q = &self.value(queries).data;
        let mut out = Vec::with_capacity(m);
        let mut neighbors = Vec::with_capacity(m);
        for r in 0..m {
            let query = [q[3 * r], q[3 * r + 1], q[3 * r + 2]];
            let nn = geom::knn(points, query, k.min(points.len()))?;
            let nb: Vec<Neighbor> = nn
                .into_iter()
                .map(|(index, dist)| Neighbor {
                    index,
                    pos: points[index],
                    raw_weight: 1.0 / (dist + eps),
                    dist,
                })
                .collect();
            let total: f64 = nb.iter().map(|n| n.raw_weight).sum();
            // Offsets from the first neighbor keep constant fields exact.
            let f0 = f[nb[0].index];
            out.push(f0 + nb.iter().map(|n| n.raw_weight * (f[n.index] - f0)).sum::<f64>() / total);
            neighbors.push(nb);
        }
        self.push(
            Tensor::vector(out),
            Op::Interpolate {
                field,
                queries,
                neighbors,
                eps,
            },
            &[field, queries],
        )
    }

    /// Softmax(`values[idx] / temp`)-weighted mean of `positions`; `[3]`.
    pub fn soft_select(&mut self, values: Var, idx: &[usize], positions: &[Point3], temp: f64) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::Empty("soft selection over an empty set"));
        }
        if idx.len() != positions.len() {
            return Err(Error::LengthMismatch {
                what: "soft-selection positions",
                expected: idx.len(),
                got: positions.len(),
            });
        }
        if !(temp > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temp}")));
        }
        let v = self.value(values);
        if v.shape.len() != 1 || idx.iter().any(|&i| i >= v.len()) {
            return Err(Error::Shape("soft selection indexes a vector".into()));
        }
        let z: Vec<f64> = idx.iter().map(|&i| v.data[i] / temp).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = z.iter().map(|zi| (zi - m).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let mut out = [0.0; 3];
        for (p, pos) in probs.iter().zip(positions) {
            for a in 0..3 {
                out[a] += p * pos[a];
            }
        }
        self.push(
            Tensor::vector(out.to_vec()),
            Op::SoftSelect {
                values,
                idx: idx.to_vec(),
                positions: positions.to_vec(),
                probs,
                temp,
            },
            &[values],
        )
    }

    /// Distance from a `[3]` point to the line.
    pub fn line_distance(&mut self, p: Var, line: &GravityLine) -> Result<Var> {
        if self.shape(p) != [3] {
            return Err(Error::Shape(format!("line_distance needs a 3-vector, got {:?}", self.shape(p))));
        }
        let d = &self.value(p).data;
        let dist = geom::point_line_distance([d[0], d[1], d[2]], line);
        self.push(
            Tensor::scalar(dist),
            Op::LineDistance {
                p,
                origin: line.origin(),
                direction: line.direction(),
            },
            &[p],
        )
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.shape(loss).to_vec(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", op_name(&node.op))));
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, a) = (self.value(*x).rows(), self.value(*x).cols());
                let nb = self.value(*w).cols();
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * a];
                    gemm(n, nb, a, &g.data, false, &self.value(*w).data, true, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor { shape: vec![n, a], data: dx });
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; a * nb];
                    gemm(a, n, nb, &self.value(*x).data, true, &g.data, false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor { shape: vec![a, nb], data: dw });
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; nb];
                    for r in 0..n {
                        for (d, v) in db.iter_mut().zip(&g.data[r * nb..(r + 1) * nb]) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, false, &self.value(*b).data, true, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor { shape: vec![m, k], data: da });
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &self.value(*a).data, true, &g.data, false, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor { shape: vec![k, n], data: db });
                }
            }
            Op::Unary { x, act } => {
                let y = &node.value.data;
                let xv = &self.value(*x).data;
                let data = match act {
                    Activation::Relu => g.data.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Activation::Sigmoid => g.data.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Activation::Tanh => g.data.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Activation::Identity => g.data.clone(),
                };
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data });
            }
            Op::MaxPool { x, argmax } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut dx = Tensor::zeros(&src.shape);
                for (j, &r) in argmax.iter().enumerate() {
                    dx.data[r * c + j] += g.data[j];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let n = self.value(*a).rows();
                let w = ca + cb;
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(n * ca);
                    for r in 0..n {
                        da.extend_from_slice(&g.data[r * w..r * w + ca]);
                    }
                    self.accumulate(grads, *a, Tensor { shape: vec![n, ca], data: da });
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        db.extend_from_slice(&g.data[r * w + ca..(r + 1) * w]);
                    }
                    self.accumulate(grads, *b, Tensor { shape: vec![n, cb], data: db });
                }
            }
            Op::RepeatRows { x } => {
                let c = self.value(*x).len();
                let n = g.len() / c.max(1);
                let mut dx = vec![0.0; c];
                for r in 0..n {
                    for (d, v) in dx.iter_mut().zip(&g.data[r * c..(r + 1) * c]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::vector(dx));
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor { shape, data: g.data.clone() });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                };
                self.accumulate(grads, *b, neg);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.wants(*a) {
                    let d = g.data.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor { shape: g.shape.clone(), data: d });
                }
                if self.wants(*b) {
                    let d = g.data.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor { shape: g.shape.clone(), data: d });
                }
            }
            Op::Scale { x, s } => {
                let d = g.data.iter().map(|v| v * s).collect();
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, g.clone()),
            Op::Square { x } => {
                let d = g.data.iter().zip(&self.value(*x).data).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Clamp { x, lo, hi, inward } => {
                let d = g
                    .data
                    .iter()
                    .zip(&self.value(*x).data)
                    .map(|(&g, &x)| {
                        let inside = x >= *lo && x <= *hi;
                        let recovering = *inward && ((x < *lo && g < 0.0) || (x > *hi && g > 0.0));
                        if inside || recovering {
                            g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor { shape: g.shape.clone(), data: d });
            }
            Op::Sum { x } => {
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).len();
                self.accumulate(grads, *x, Tensor { shape, data: vec![g.item(); n] });
            }
            Op::WeightedSum { x, weights } => {
                let shape = self.shape(*x).to_vec();
                let gi = g.item();
                self.accumulate(grads, *x, Tensor { shape, data: weights.iter().map(|w| w * gi).collect() });
            }
            Op::GatherRows { x, idx } => {
                let src = self.value(*x);
                let c = if src.shape.len() == 1 { 1 } else { src.cols() };
                let mut dx = Tensor::zeros(&src.shape);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx.data[i * c + j] += g.data[r * c + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Column { x, col } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut dx = Tensor::zeros(&src.shape);
                for (r, v) in g.data.iter().enumerate() {
                    dx.data[r * c + col] = *v;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let src = self.value(*logits);
                let (n, c) = (src.rows(), src.cols());
                let scale = g.item() / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor { shape: vec![n, c], data: d });
            }
            Op::Interpolate {
                field,
                queries,
                neighbors,
                eps,
            } => {
                let f = &self.value(*field).data;
                let q = &self.value(*queries).data;
                let mut df = vec![0.0; f.len()];
                let mut dq = vec![0.0; q.len()];
                for (r, nb) in neighbors.iter().enumerate() {
                    let gr = g.data[r];
                    let total: f64 = nb.iter().map(|n| n.raw_weight).sum();
                    let y = node.value.data[r];
                    let query = [q[3 * r], q[3 * r + 1], q[3 * r + 2]];
                    for n in nb {
                        df[n.index] += gr * n.raw_weight / total;
                        if n.dist > 0.0 {
                            // dy/dw * dw/dd * dd/dq
                            let dy_dw = (f[n.index] - y) / total;
                            let dw_dd = -1.0 / ((n.dist + eps) * (n.dist + eps));
                            let s = gr * dy_dw * dw_dd / n.dist;
                            for a in 0..3 {
                                dq[3 * r + a] += s * (query[a] - n.pos[a]);
                            }
                        }
                    }
                }
                if self.wants(*field) {
                    self.accumulate(grads, *field, Tensor::vector(df));
                }
                if self.wants(*queries) {
                    let shape = self.shape(*queries).to_vec();
                    self.accumulate(grads, *queries, Tensor { shape, data: dq });
                }
            }
            Op::SoftSelect {
                values,
                idx,
                positions,
                probs,
                temp,
            } => {
                let out = &node.value.data;
                let mut dv = Tensor::zeros(self.shape(*values));
                for ((&i, p), pos) in idx.iter().zip(probs).zip(positions) {
                    let mut proj = 0.0;
                    for a in 0..3 {
                        proj += g.data[a] * (pos[a] - out[a]);
                    }
                    dv.data[i] += proj * p / temp;
                }
                self.accumulate(grads, *values, dv);
            }
            Op::LineDistance { p, origin, direction } => {
                let dist = node.value.item();
                if dist > 0.0 {
                    // Gradient is the unit perpendicular from the line to p.
                    let pv = &self.value(*p).data;
                    let rel = [pv[0] - origin[0], pv[1] - origin[1], pv[2] - origin[2]];
                    let along = geom::dot(rel, *direction);
                    let perp = geom::sub(rel, geom::scale(*direction, along));
                    let gi = g.item() / dist;
                    self.accumulate(grads, *p, Tensor::vector(perp.iter().map(|v| v * gi).collect()));
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::MatMul { .. } => "matmul",
        Op::Unary { .. } => "activation",
        Op::MaxPool { .. } => "max_pool_points",
        Op::Concat { .. } => "concat_features",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::Reshape { .. } => "reshape",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Square { .. } => "square",
        Op::Clamp { .. } => "clamp",
        Op::Sum { .. } => "sum",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::GatherRows { .. } => "gather_rows",
        Op::Column { .. } => "column",
        Op::CrossEntropy { .. } => "softmax_cross_entropy",
        Op::Interpolate { .. } => "interpolate",
        Op::SoftSelect { .. } => "soft_select",
        Op::LineDistance { .. } => "line_distance",
    }
}

/// Largest relative disagreement between the analytic gradient of `f` and
/// central differences with step `eps`, over every coordinate of every
/// parameter: `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for c in 0..params[pi].len() {
            let orig = params[pi].data[c];
            work[pi].data[c] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data[c] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic.data[c] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let b2 = g.constant(Tensor::vector(vec![0.5, -1.5]));
        let y = g.linear(z, w, b2).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

        let bad = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.linear(bad, w, b).is_err());
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (xa, wa, ba) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng));
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(xa.clone()), g.constant(wa.clone()), g.constant(ba.clone()));
        let y = g.linear(x, w, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = ba.data[j];
                for k in 0..4 {
                    acc += xa.data[i * 4 + k] * wa.data[k * 2 + j];
                }
                assert!((g.value(y).data[i * 2 + j] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sigmoid(x).unwrap();
        let t = g.tanh(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(g.value(s).data()[1], 0.5);
        assert_eq!(g.value(t).data()[1], 0.0);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn max_pool_cases() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::matrix(1, 3, vec![4.0, -1.0, 2.0]).unwrap());
        let p = g.max_pool_points(one).unwrap();
        assert_eq!(g.value(p).data(), &[4.0, -1.0, 2.0]);
        let two = g.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let p = g.max_pool_points(two).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = random(&[100, 8], &mut rng);
        let v = g.constant(big.clone());
        let p = g.max_pool_points(v).unwrap();
        for j in 0..8 {
            let mut m = f64::NEG_INFINITY;
            for i in 0..100 {
                m = m.max(big.data[i * 8 + j]);
            }
            assert_eq!(g.value(p).data[j], m);
        }
    }

    #[test]
    fn inward_clamp_recovers_from_outside_the_bounds() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-0.5, 0.5, 1.5, -0.5]));
        let exact = g.clamp(x, 0.0, 1.0).unwrap();
        let inward = g.clamp_inward(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(exact), g.value(inward));
        // Loss rewards raising the first three entries and lowering the last.
        let lin = g.weighted_sum(inward, vec![-1.0, -1.0, -1.0, 1.0]).unwrap();
        let d = g.backward(lin).unwrap().wrt(x);
        assert_eq!(d.data(), &[-1.0, -1.0, 0.0, 0.0]);
        let lin = g.weighted_sum(exact, vec![-1.0, -1.0, -1.0, 1.0]).unwrap();
        assert_eq!(g.backward(lin).unwrap().wrt(x).data(), &[0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
        let p = g.max_pool_points(x).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let empty = g.constant(Tensor::zeros(&[4, 0]));
        let bt = random(&[4, 3], &mut rng);
        let b = g.constant(bt.clone());
        let c = g.concat_features(empty, b).unwrap();
        assert_eq!(g.value(c), &bt);

        let at = random(&[4, 2], &mut rng);
        let a = g.constant(at.clone());
        let ab = g.concat_features(a, b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let want = if j < 2 { at.data[i * 2 + j] } else { bt.data[i * 3 + j - 2] };
                assert_eq!(g.value(ab).data[i * 5 + j], want);
            }
        }
        let cols: Vec<Var> = (0..5).map(|j| g.column(ab, j).unwrap()).collect();
        for i in 0..4 {
            assert_eq!(g.value(cols[0]).data[i], at.data[i * 2]);
            assert_eq!(g.value(cols[4]).data[i], bt.data[i * 3 + 2]);
        }
        let short = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.concat_features(a, short).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let s = g.sum(w).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(w).data(), &[1.0, 1.0, 1.0]);

        let sq = g.square(w).unwrap();
        let total = g.sum(sq).unwrap();
        let half = g.scale(total, 0.5).unwrap();
        assert_eq!(g.backward(half).unwrap().wrt(w).data(), &[0.3, -1.2, 2.0]);

        assert!(g.backward(w).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e300]));
        assert!(matches!(g.square(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_check_on_known_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 0.5 x^T A x with A = M^T M
        let m = random(&[4, 4], &mut rng);
        let x0 = random(&[4, 1], &mut rng);
        let quad = |g: &mut Graph, p: &[Var]| {
            let mm = g.constant(m.clone());
            let mx = g.matmul(mm, p[0])?;
            let sq = g.square(mx)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        };
        assert!(grad_check(quad, &[x0.clone()], 1e-6).unwrap() <= 1e-9);

        let w = random(&[4], &mut rng);
        let lin = |g: &mut Graph, p: &[Var]| g.weighted_sum(p[0], w.data.clone());
        assert!(grad_check(lin, &[random(&[4], &mut rng)], 1e-6).unwrap() <= 1e-8);
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-6;
        let xs = random(&[5, 3], &mut rng);
        let ws = random(&[3, 4], &mut rng);
        let bs = random(&[4], &mut rng);
        // Fixed random projection so every check reduces to a scalar.
        let proj = |g: &mut Graph, v: Var, seed: u64| -> Result<Var> {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = g.value(v).len();
            let w = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            g.weighted_sum(v, w)
        };

        let checks: Vec<(&str, f64)> = vec![
            ("linear", grad_check(|g, p| { let y = g.linear(p[0], p[1], p[2])?; proj(g, y, 1) }, &[xs.clone(), ws.clone(), bs.clone()], 1e-6).unwrap()),
            ("matmul", grad_check(|g, p| { let y = g.matmul(p[0], p[1])?; proj(g, y, 2) }, &[xs.clone(), ws.clone()], 1e-6).unwrap()),
            ("sigmoid", grad_check(|g, p| { let y = g.sigmoid(p[0])?; proj(g, y, 3) }, &[xs.clone()], 1e-6).unwrap()),
            ("tanh", grad_check(|g, p| { let y = g.tanh(p[0])?; proj(g, y, 4) }, &[xs.clone()], 1e-6).unwrap()),
            ("relu", grad_check(|g, p| { let y = g.relu(p[0])?; proj(g, y, 5) }, &[xs.clone()], 1e-6).unwrap()),
            ("max_pool", grad_check(|g, p| { let y = g.max_pool_points(p[0])?; proj(g, y, 6) }, &[xs.clone()], 1e-6).unwrap()),
            ("concat", grad_check(|g, p| { let y = g.concat_features(p[0], p[1])?; proj(g, y, 7) }, &[xs.clone(), random(&[5, 2], &mut rng)], 1e-6).unwrap()),
            ("repeat_rows", grad_check(|g, p| { let y = g.repeat_rows(p[0], 3)?; proj(g, y, 8) }, &[bs.clone()], 1e-6).unwrap()),
            ("mul", grad_check(|g, p| { let y = g.mul(p[0], p[1])?; proj(g, y, 9) }, &[xs.clone(), random(&[5, 3], &mut rng)], 1e-6).unwrap()),
            ("sub_square", grad_check(|g, p| { let d = g.sub(p[0], p[1])?; let y = g.square(d)?; proj(g, y, 10) }, &[xs.clone(), random(&[5, 3], &mut rng)], 1e-6).unwrap()),
            ("clamp", grad_check(|g, p| { let y = g.clamp(p[0], -0.5, 0.5)?; proj(g, y, 11) }, &[xs.clone()], 1e-6).unwrap()),
            ("gather", grad_check(|g, p| { let y = g.gather_rows(p[0], &[4, 0, 4, 2])?; proj(g, y, 12) }, &[xs.clone()], 1e-6).unwrap()),
            ("column", grad_check(|g, p| { let y = g.column(p[0], 1)?; proj(g, y, 13) }, &[xs.clone()], 1e-6).unwrap()),
            ("cross_entropy", grad_check(|g, p| g.softmax_cross_entropy(p[0], &[0, 2, 1, 1, 0]), &[xs.clone()], 1e-6).unwrap()),
        ];
        for (name, err) in checks {
            assert!(err <= tol, "{name}: {err}");
        }
    }

    #[test]
    fn geometric_primitives_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point3> = (0..30).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let field = Tensor::vector((0..30).map(|_| rng.gen()).collect());
        let queries = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
        let err = grad_check(
            |g, p| {
                let y = g.interpolate(p[0], p[1], &pts, 4, 1e-6)?;
                g.weighted_sum(y, vec![1.0, -0.5, 0.7, 0.2])
            },
            &[field.clone(), queries],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "interpolate: {err}");

        let idx = vec![1, 5, 7, 20];
        let pos: Vec<Point3> = idx.iter().map(|&i| pts[i]).collect();
        let line = GravityLine::downward_through([0.5, 0.5, 0.5]);
        let err = grad_check(
            |g, p| {
                let c = g.soft_select(p[0], &idx, &pos, 0.3)?;
                g.line_distance(c, &line)
            },
            &[field],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "soft_select/line_distance: {err}");
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wt = random(&[6], &mut rng);
        let build = |g: &mut Graph, w: Var, which: u8| -> Var {
            match which {
                0 => {
                    let t = g.tanh(w).unwrap();
                    g.sum(t).unwrap()
                }
                _ => {
                    let s = g.square(w).unwrap();
                    g.weighted_sum(s, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()
                }
            }
        };
        let (alpha, beta) = (0.7, -1.3);
        let mut g = Graph::new();
        let w = g.leaf(wt.clone());
        let l1 = build(&mut g, w, 0);
        let l2 = build(&mut g, w, 1);
        let a = g.scale(l1, alpha).unwrap();
        let b = g.scale(l2, beta).unwrap();
        let total = g.add(a, b).unwrap();
        let combined = g.backward(total).unwrap().wrt(w);
        let g1 = g.backward(l1).unwrap().wrt(w);
        let g2 = g.backward(l2).unwrap().wrt(w);
        for i in 0..6 {
            let want = alpha * g1.data[i] + beta * g2.data[i];
            assert!((combined.data[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let mut g = Graph::new();
            let x = g.constant(random(&[64, 16], &mut rng));
            let w = g.leaf(random(&[16, 32], &mut rng));
            let b = g.leaf(random(&[32], &mut rng));
            let y = g.linear(x, w, b).unwrap();
            let p = g.max_pool_points(y).unwrap();
            g.value(p).clone()
        };
        assert_eq!(run(), run());
    }
}
