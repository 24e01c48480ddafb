//! Training objectives.
//!
//! Each loss is built on a [`Graph`] so it can be differentiated; the
//! `*_value` helpers evaluate the same expressions on plain arrays.
//!
//! The balance term needs "the highest-saliency point of each hand", which
//! has no gradient with respect to saliency. During training it is replaced
//! by a softmax-weighted selection whose temperature is annealed toward the
//! hard choice.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::VectorGT;
use crate::error::{check_len, Error, Result};
use crate::geom::{self, ContactLabels, GravityLine, Label, Point3, PointCloud};

/// Neighbors and softening used when evaluating saliency at `x_i + v_i`.
pub const INTERP_K: usize = 4;
pub const INTERP_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub softsel_temp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.5,
            w1: 1.0,
            w2: 1.0,
            w3: 2.0,
            w4: 1.5,
            softsel_temp: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.w1, self.w2, self.w3, self.w4];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        if !(self.softsel_temp > 0.0 && self.softsel_temp.is_finite()) {
            return Err(Error::InvalidArgument("soft-selection temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Which points the saliency-consistency term constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Before the first saliency update: unlabeled and right-hand points.
    PreIteration,
    /// After it: unlabeled points only.
    Iteration,
}

impl Phase {
    fn constrains(self, l: Label) -> bool {
        match self {
            Phase::PreIteration => matches!(l, Label::None | Label::Right),
            Phase::Iteration => l == Label::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn label(self) -> Label {
        match self {
            Side::Left => Label::Left,
            Side::Right => Label::Right,
        }
    }
}

/// Soft-selection temperature at a given epoch: halved every
/// `halving_epochs`, never below `floor`.
pub fn annealed_temperature(base: f64, epoch: usize, halving_epochs: usize, floor: f64) -> f64 {
    let halvings = if halving_epochs == 0 { 0 } else { epoch / halving_epochs };
    (base * 0.5f64.powi(halvings.min(1000) as i32)).max(floor)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn vec_len(g: &Graph, v: Var) -> usize {
    g.value(v).len()
}

/// Pushes right-hand points toward 1 and everything else toward 0.
pub fn correct(g: &mut Graph, s: Var, labels: &ContactLabels) -> Result<Var> {
    let n = labels.len();
    check_len("saliency", n, vec_len(g, s))?;
    let target: Vec<f64> = labels.as_slice().iter().map(|&l| (l == Label::Right) as u8 as f64).collect();
    let t = g.constant(Tensor::vector(target));
    let d = g.sub(s, t)?;
    let sq = g.square(d)?;
    g.weighted_sum(sq, vec![1.0 / n as f64; n])
}

/// Squared error between predicted displacement rows and per-point targets,
/// over labeled points, divided by the total point count.
pub fn correspondence(g: &mut Graph, v_pred: Var, targets: &[Option<Point3>], labels: &ContactLabels) -> Result<Var> {
    let n = labels.len();
    check_len("correspondence targets", n, targets.len())?;
    if g.value(v_pred).shape() != [n, 3] {
        return Err(Error::Shape(format!("predicted vectors {:?}, expected [{n}, 3]", g.value(v_pred).shape())));
    }
    let mut t = Vec::with_capacity(3 * n);
    let mut w = Vec::with_capacity(3 * n);
    for (i, (&l, target)) in labels.as_slice().iter().zip(targets).enumerate() {
        let on = l != Label::None;
        match (on, target) {
            (true, None) => {
                return Err(Error::InvalidArgument(format!("labeled point {i} has no target vector")));
            }
            (true, Some(v)) => t.extend_from_slice(v),
            (false, _) => t.extend_from_slice(&[0.0; 3]),
        }
        w.extend([if on { 1.0 / n as f64 } else { 0.0 }; 3]);
    }
    let tv = g.constant(Tensor::matrix(n, 3, t)?);
    let d = g.sub(v_pred, tv)?;
    let sq = g.square(d)?;
    g.weighted_sum(sq, w)
}

/// Saliency agreement between each labeled point and the point its predicted
/// vector lands on. The landing value is interpolated, so the loss is
/// differentiable in both `b` and the vectors.
pub fn pair_agreement(g: &mut Graph, b: Var, v_pred: Var, cloud: &PointCloud, labels: &ContactLabels) -> Result<Var> {
    let n = labels.len();
    check_len("saliency", n, vec_len(g, b))?;
    check_len("cloud", n, cloud.len())?;
    let idx = labels.contact_indices();
    if idx.is_empty() {
        return Ok(zero(g));
    }
    let rows = g.gather_rows(v_pred, &idx)?;
    let origins: Vec<f64> = idx.iter().flat_map(|&i| cloud.points()[i]).collect();
    let o = g.constant(Tensor::matrix(idx.len(), 3, origins)?);
    let queries = g.add(rows, o)?;
    let bj = g.interpolate(b, queries, cloud.points(), INTERP_K, INTERP_EPS)?;
    let bi = g.gather_rows(b, &idx)?;
    let d = g.sub(bi, bj)?;
    let sq = g.square(d)?;
    g.weighted_sum(sq, vec![1.0 / n as f64; idx.len()])
}

/// Keeps `b` equal to `s` on the points the phase constrains.
pub fn consistency(g: &mut Graph, b: Var, s: Var, labels: &ContactLabels, phase: Phase) -> Result<Var> {
    let n = labels.len();
    check_len("saliency", n, vec_len(g, b))?;
    check_len("single-handed saliency", n, vec_len(g, s))?;
    let w: Vec<f64> = labels
        .as_slice()
        .iter()
        .map(|&l| if phase.constrains(l) { 1.0 / n as f64 } else { 0.0 })
        .collect();
    let d = g.sub(b, s)?;
    let sq = g.square(d)?;
    g.weighted_sum(sq, w)
}

/// `lambda1 * agreement + lambda2 * consistency`.
pub fn adjustment(
    g: &mut Graph,
    b: Var,
    s: Var,
    v_pred: Var,
    cloud: &PointCloud,
    labels: &ContactLabels,
    weights: &LossWeights,
    phase: Phase,
) -> Result<Var> {
    let a1 = pair_agreement(g, b, v_pred, cloud, labels)?;
    let a2 = consistency(g, b, s, labels, phase)?;
    let a1 = g.scale(a1, weights.lambda1)?;
    let a2 = g.scale(a2, weights.lambda2)?;
    g.add(a1, a2)
}

/// Softmax(`b / temp`)-weighted position over the points with the given
/// indices.
pub fn soft_select(g: &mut Graph, cloud: &PointCloud, b: Var, idx: &[usize], temp: f64) -> Result<Var> {
    let pos: Vec<Point3> = idx.iter().map(|&i| cloud.points()[i]).collect();
    g.soft_select(b, idx, &pos, temp)
}

/// Soft selection over one hand's labeled points.
pub fn soft_select_contact(g: &mut Graph, cloud: &PointCloud, b: Var, labels: &ContactLabels, side: Side, temp: f64) -> Result<Var> {
    let idx = labels.indices(side.label());
    if idx.is_empty() {
        return Err(Error::EmptySide(side.label().name()));
    }
    soft_select(g, cloud, b, &idx, temp)
}

/// Distance of the midpoint of two soft-selected point sets from the
/// gravity line.
pub fn balance_between(g: &mut Graph, cloud: &PointCloud, b: Var, first: &[usize], second: &[usize], gravity: &GravityLine, temp: f64) -> Result<Var> {
    let xa = soft_select(g, cloud, b, first, temp)?;
    let xb = soft_select(g, cloud, b, second, temp)?;
    let sum = g.add(xa, xb)?;
    let mid = g.scale(sum, 0.5)?;
    g.line_distance(mid, gravity)
}

/// Balance of the soft-selected left/right pair.
pub fn balance(g: &mut Graph, cloud: &PointCloud, b: Var, labels: &ContactLabels, gravity: &GravityLine, temp: f64) -> Result<Var> {
    check_len("saliency", cloud.len(), vec_len(g, b))?;
    let left = labels.indices(Label::Left);
    let right = labels.indices(Label::Right);
    if left.is_empty() {
        return Err(Error::EmptySide(Label::Left.name()));
    }
    if right.is_empty() {
        return Err(Error::EmptySide(Label::Right.name()));
    }
    balance_between(g, cloud, b, &left, &right, gravity, temp)
}

/// Graph handles and fixed inputs for one object's saliency objective.
pub struct SaliencyTerms<'a> {
    pub cloud: &'a PointCloud,
    pub labels: &'a ContactLabels,
    pub gravity: &'a GravityLine,
    /// Current single-handed map (normally a constant).
    pub s: Var,
    /// Bimanual map.
    pub b: Var,
    /// `N x 3` predicted vectors.
    pub v: Var,
    /// Per-point correspondence targets.
    pub targets: &'a [Option<Point3>],
    pub phase: Phase,
    pub temp: f64,
}

/// The individual terms and their weighted total.
pub struct SaliencyLoss {
    pub correspondence: Var,
    pub agreement: Var,
    pub consistency: Var,
    pub adjustment: Var,
    pub balance: Var,
    pub total: Var,
}

/// `w1 * correspondence + w2 * adjustment + w3 * balance`.
pub fn total(g: &mut Graph, t: &SaliencyTerms, w: &LossWeights) -> Result<SaliencyLoss> {
    let lc = correspondence(g, t.v, t.targets, t.labels)?;
    let a1 = pair_agreement(g, t.b, t.v, t.cloud, t.labels)?;
    let a2 = consistency(g, t.b, t.s, t.labels, t.phase)?;
    let a1w = g.scale(a1, w.lambda1)?;
    let a2w = g.scale(a2, w.lambda2)?;
    let la = g.add(a1w, a2w)?;
    let lp = balance(g, t.cloud, t.b, t.labels, t.gravity, t.temp)?;
    let c = g.scale(lc, w.w1)?;
    let a = g.scale(la, w.w2)?;
    let p = g.scale(lp, w.w3)?;
    let ca = g.add(c, a)?;
    let tot = g.add(ca, p)?;
    Ok(SaliencyLoss {
        correspondence: lc,
        agreement: a1,
        consistency: a2,
        adjustment: la,
        balance: lp,
        total: tot,
    })
}

/// `w4 * mean cross-entropy + total`.
pub fn classify(g: &mut Graph, logits: Var, labels_gt: &ContactLabels, total: Var, w4: f64) -> Result<Var> {
    let targets: Vec<usize> = labels_gt.as_slice().iter().map(|&l| l as usize).collect();
    let ce = g.softmax_cross_entropy(logits, &targets)?;
    let ce = g.scale(ce, w4)?;
    g.add(ce, total)
}

/// Per labeled point, the candidate vector closest to the current
/// prediction. Unlabeled points get `None`.
pub fn nearest_targets(v_pred: &Tensor, gt: &VectorGT, labels: &ContactLabels) -> Result<Vec<Option<Point3>>> {
    let n = labels.len();
    if v_pred.shape() != [n, 3] {
        return Err(Error::Shape(format!("predicted vectors {:?}, expected [{n}, 3]", v_pred.shape())));
    }
    check_len("vector ground truth", n, gt.len())?;
    (0..n)
        .map(|i| {
            let cands = gt.candidates(i);
            if labels.get(i) == Label::None {
                return Ok(None);
            }
            if cands.is_empty() {
                return Err(Error::InvalidArgument(format!("labeled point {i} has no candidate vectors")));
            }
            let row = v_pred.row(i);
            let p = [row[0], row[1], row[2]];
            let best = cands
                .iter()
                .min_by(|a, b| geom::dist(**a, p).total_cmp(&geom::dist(**b, p)))
                .expect("non-empty");
            Ok(Some(*best))
        })
        .collect()
}

/// Highest-saliency point among `idx` (first index on ties).
pub fn hard_select(cloud: &PointCloud, b: &[f64], idx: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &i in idx {
        if best.is_none_or(|j| b[i] > b[j]) {
            best = Some(i);
        }
    }
    let _ = cloud;
    best.ok_or(Error::Empty("hard selection over an empty set"))
}

/// Balance distance of the highest-saliency pair drawn from two index sets.
pub fn hard_balance(cloud: &PointCloud, b: &[f64], first: &[usize], second: &[usize], gravity: &GravityLine) -> Result<f64> {
    let i = hard_select(cloud, b, first)?;
    let j = hard_select(cloud, b, second)?;
    Ok(geom::point_line_distance(geom::midpoint(cloud.points()[i], cloud.points()[j]), gravity))
}

/// Balance distance of the highest-saliency left/right pair.
pub fn hard_balance_lr(cloud: &PointCloud, b: &[f64], labels: &ContactLabels, gravity: &GravityLine) -> Result<f64> {
    let left = labels.indices(Label::Left);
    let right = labels.indices(Label::Right);
    if left.is_empty() {
        return Err(Error::EmptySide(Label::Left.name()));
    }
    if right.is_empty() {
        return Err(Error::EmptySide(Label::Right.name()));
    }
    hard_balance(cloud, b, &left, &right, gravity)
}

fn eval_scalar(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

pub fn l_correct(s: &[f64], labels: &ContactLabels) -> Result<f64> {
    eval_scalar(|g| {
        let s = g.constant(Tensor::vector(s.to_vec()));
        correct(g, s, labels)
    })
}

pub fn l_c(v_pred: &Tensor, targets: &[Option<Point3>], labels: &ContactLabels) -> Result<f64> {
    eval_scalar(|g| {
        let v = g.constant(v_pred.clone());
        correspondence(g, v, targets, labels)
    })
}

pub fn l_a1(b: &[f64], v_pred: &Tensor, cloud: &PointCloud, labels: &ContactLabels) -> Result<f64> {
    eval_scalar(|g| {
        let bv = g.constant(Tensor::vector(b.to_vec()));
        let v = g.constant(v_pred.clone());
        pair_agreement(g, bv, v, cloud, labels)
    })
}

pub fn l_a2(b: &[f64], s: &[f64], labels: &ContactLabels, phase: Phase) -> Result<f64> {
    eval_scalar(|g| {
        let bv = g.constant(Tensor::vector(b.to_vec()));
        let sv = g.constant(Tensor::vector(s.to_vec()));
        consistency(g, bv, sv, labels, phase)
    })
}

pub fn l_p(cloud: &PointCloud, b: &[f64], labels: &ContactLabels, gravity: &GravityLine, temp: f64) -> Result<f64> {
    eval_scalar(|g| {
        let bv = g.constant(Tensor::vector(b.to_vec()));
        balance(g, cloud, bv, labels, gravity, temp)
    })
}

pub fn soft_select_contact_value(cloud: &PointCloud, b: &[f64], labels: &ContactLabels, side: Side, temp: f64) -> Result<Point3> {
    let mut g = Graph::new();
    let bv = g.constant(Tensor::vector(b.to_vec()));
    let x = soft_select_contact(&mut g, cloud, bv, labels, side, temp)?;
    let d = g.value(x).data();
    Ok([d[0], d[1], d[2]])
}
