//! Inference: bimanual saliency and contact labels, physics-aware
//! refinement, contact extraction, and evaluation metrics.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{check_len, Error, Result};
use crate::geom::{self, ContactLabels, GravityLine, Label, Point3, PointCloud, SaliencyMap};
use crate::losses;
use crate::nets::{self, graph, ModelWeights, RefineNet};
use crate::train::{Optimizer, OptimizerKind};

/// Contact-mask threshold applied to the bimanual map.
pub const DEFAULT_MASK_TAU: f64 = 0.5;
/// Saliency threshold of the coverage metric.
pub const DEFAULT_TAU_C: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub b: SaliencyMap,
    pub labels: ContactLabels,
    pub logits: Tensor,
}

/// Row-wise argmax; ties go to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Result<ContactLabels> {
    if logits.shape().len() != 2 || logits.cols() != 3 {
        return Err(Error::Shape(format!("logits must be N x 3, got {:?}", logits.shape())));
    }
    let raw: Vec<u8> = (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            let mut best = 0;
            for c in 1..3 {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    ContactLabels::from_u8(&raw)
}

/// Bimanual map through the adjustment branch, then contact classes.
pub fn predict(weights: &ModelWeights, cloud: &PointCloud, s: &SaliencyMap) -> Result<Prediction> {
    check_len("saliency", cloud.len(), s.len())?;
    let b = nets::bspn_adjust(weights, cloud, s)?;
    let logits = nets::bcpn_forward(weights, cloud, &b)?;
    Ok(Prediction {
        labels: argmax_labels(&logits)?,
        b,
        logits,
    })
}

/// Keeps a label only where `b >= tau`.
pub fn mask_labels(b: &SaliencyMap, labels: &ContactLabels, tau: f64) -> Result<ContactLabels> {
    check_len("labels", b.len(), labels.len())?;
    Ok(ContactLabels::new(
        labels
            .as_slice()
            .iter()
            .zip(b.values())
            .map(|(&l, &v)| if v >= tau { l } else { Label::None })
            .collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Success threshold on the balance distance.
    pub w_r: f64,
    pub max_iters: usize,
    pub lr: f64,
    pub temp: f64,
    /// Weight of the mean squared adjustment.
    pub mu: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            w_r: 0.12,
            max_iters: 500,
            lr: 1e-2,
            temp: 0.05,
            mu: 0.1,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_r > 0.0) {
            return Err(Error::InvalidArgument("w_r must be positive".into()));
        }
        if !(self.lr > 0.0 && self.temp > 0.0 && self.mu >= 0.0) {
            return Err(Error::InvalidArgument("refinement lr and temp must be positive, mu nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub iter: usize,
    pub objective: f64,
    pub distance: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub b_r: SaliencyMap,
    /// Optimizer steps taken.
    pub iterations: usize,
    pub converged: bool,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub trace: Vec<RefineStep>,
}

impl RefineOutcome {
    /// Objective values of accepted iterates in order.
    pub fn accepted_objectives(&self) -> Vec<f64> {
        self.trace.iter().filter(|s| s.accepted).map(|s| s.objective).collect()
    }
}

/// The two sides used at refinement time: right-hand points, and every
/// point not labeled right.
fn refine_sides(labels: &ContactLabels) -> Result<(Vec<usize>, Vec<usize>)> {
    let right = labels.indices(Label::Right);
    let other: Vec<usize> = (0..labels.len()).filter(|&i| labels.get(i) != Label::Right).collect();
    if right.is_empty() {
        return Err(Error::EmptySide(Label::Right.name()));
    }
    if other.is_empty() {
        return Err(Error::EmptySide("not-right"));
    }
    Ok((right, other))
}

struct Eval {
    objective: f64,
    distance: f64,
    b_r: Vec<f64>,
    grads: Vec<Tensor>,
}

fn refine_eval(net: &RefineNet, cloud: &PointCloud, b: &[f64], labels: &ContactLabels, sides: &(Vec<usize>, Vec<usize>), gravity: &GravityLine, cfg: &RefineConfig) -> Result<Eval> {
    let n = cloud.len();
    let mut g = Graph::new();
    let vars = net.mlp.bind(&mut g, true);
    let (br, r) = graph::refine(&mut g, &vars, cloud, b, labels)?;
    let bal = losses::balance_between(&mut g, cloud, br, &sides.0, &sides.1, gravity, cfg.temp)?;
    let r2 = g.square(r)?;
    let prox = g.weighted_sum(r2, vec![cfg.mu / n as f64; n])?;
    let obj = g.add(bal, prox)?;
    let grads = g.backward(obj)?;
    let b_r = g.value(br).data().to_vec();
    let distance = losses::hard_balance(cloud, &b_r, &sides.0, &sides.1, gravity)?;
    Ok(Eval {
        objective: g.value(obj).item(),
        distance,
        grads: vars.vars().iter().map(|&v| grads.wrt(v)).collect(),
        b_r,
    })
}

/// Test-time optimization of the refinement net so the highest-saliency
/// right-hand point and the highest-saliency other point straddle the
/// gravity line. Steps that raise the objective are rejected and the step
/// size halved, so accepted objectives never increase.
pub fn physics_refine(
    net: &RefineNet,
    cloud: &PointCloud,
    b: &SaliencyMap,
    labels_pred: &ContactLabels,
    cfg: &RefineConfig,
    gravity: &GravityLine,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    check_len("saliency", cloud.len(), b.len())?;
    check_len("labels", cloud.len(), labels_pred.len())?;
    let sides = refine_sides(labels_pred)?;
    let initial = losses::hard_balance(cloud, b.values(), &sides.0, &sides.1, gravity)?;
    if initial < cfg.w_r {
        return Ok(RefineOutcome {
            b_r: b.clone(),
            iterations: 0,
            converged: true,
            initial_distance: initial,
            final_distance: initial,
            trace: Vec::new(),
        });
    }
    let mut net = net.clone();
    let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, cfg.lr);
    let mut cur = refine_eval(&net, cloud, b.values(), labels_pred, &sides, gravity, cfg)?;
    let mut trace = vec![RefineStep {
        iter: 0,
        objective: cur.objective,
        distance: cur.distance,
        accepted: true,
    }];
    let mut best = (cur.distance, cur.b_r.clone());
    let mut iterations = 0;
    while iterations < cfg.max_iters && cur.distance >= cfg.w_r {
        iterations += 1;
        let mut cand = net.clone();
        let saved = opt.clone();
        opt.step(&mut cand.mlp.params_mut(), &cur.grads)?;
        let next = refine_eval(&cand, cloud, b.values(), labels_pred, &sides, gravity, cfg)?;
        let accepted = next.objective <= cur.objective;
        trace.push(RefineStep {
            iter: iterations,
            objective: next.objective,
            distance: next.distance,
            accepted,
        });
        if accepted {
            net = cand;
            cur = next;
            if cur.distance < best.0 {
                best = (cur.distance, cur.b_r.clone());
            }
        } else {
            opt = saved;
            opt.lr *= 0.5;
        }
    }
    let converged = cur.distance < cfg.w_r;
    let (final_distance, b_r) = if converged { (cur.distance, cur.b_r) } else { best };
    if !converged {
        log::warn!("refinement did not reach w_r={} after {iterations} iterations (distance {final_distance:.4})", cfg.w_r);
    }
    Ok(RefineOutcome {
        b_r: SaliencyMap::clamped(b_r)?,
        iterations,
        converged,
        initial_distance: initial,
        final_distance,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    /// Cluster index of every point.
    pub assignment: Vec<usize>,
    /// Sum of squared distances to cluster centers.
    pub inertia: f64,
}

pub const KMEANS_K: usize = 3;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_RESTARTS: usize = 8;

type Row = [f64; 4];

fn d2(a: &Row, b: &Row) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances of rows to their cluster means.
pub fn within_cluster_ss(rows: &[Row], assignment: &[usize], k: usize) -> f64 {
    let mut sum = vec![[0.0; 4]; k];
    let mut count = vec![0usize; k];
    for (r, &c) in rows.iter().zip(assignment) {
        for a in 0..4 {
            sum[c][a] += r[a];
        }
        count[c] += 1;
    }
    let means: Vec<Row> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n == 0 { [0.0; 4] } else { s.map(|v| v / n as f64) })
        .collect();
    rows.iter().zip(assignment).map(|(r, &c)| d2(r, &means[c])).sum()
}

fn nearest(row: &Row, centers: &[Row]) -> usize {
    let mut best = 0;
    for c in 1..centers.len() {
        if d2(row, &centers[c]) < d2(row, &centers[best]) {
            best = c;
        }
    }
    best
}

fn min_d2(row: &Row, centers: &[Row]) -> f64 {
    centers.iter().map(|c| d2(row, c)).fold(f64::INFINITY, f64::min)
}

fn farthest_point_init(rows: &[Row], first: usize, k: usize) -> Vec<Row> {
    let mut centers = vec![rows[first]];
    while centers.len() < k {
        let far = (0..rows.len())
            .map(|i| (min_d2(&rows[i], &centers), i))
            .fold((-1.0, 0), |best, x| if x.0 > best.0 { x } else { best });
        centers.push(rows[far.1]);
    }
    centers
}

/// k-means++ seeding: each new center drawn with probability proportional
/// to squared distance from the nearest existing one.
fn d2_sampled_init(rows: &[Row], k: usize, rng: &mut ChaCha8Rng) -> Vec<Row> {
    let mut centers = vec![rows[rng.gen_range(0..rows.len())]];
    while centers.len() < k {
        let w: Vec<f64> = rows.iter().map(|r| min_d2(r, &centers)).collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = w.iter().rposition(|&x| x > 0.0).unwrap_or(0);
        for (i, &x) in w.iter().enumerate() {
            if x > 0.0 && u < x {
                pick = i;
                break;
            }
            u -= x;
        }
        centers.push(rows[pick]);
    }
    centers
}

fn lloyd(rows: &[Row], mut centers: Vec<Row>, k: usize) -> (Vec<usize>, f64) {
    let mut assign: Vec<usize> = rows.iter().map(|r| nearest(r, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sum = vec![[0.0; 4]; k];
        let mut count = vec![0usize; k];
        for (r, &c) in rows.iter().zip(&assign) {
            for a in 0..4 {
                sum[c][a] += r[a];
            }
            count[c] += 1;
        }
        for c in 0..k {
            if count[c] > 0 {
                centers[c] = sum[c].map(|v| v / count[c] as f64);
            } else {
                // Re-seed an empty cluster at the worst-fit point.
                let worst = (0..rows.len())
                    .max_by(|&i, &j| d2(&rows[i], &centers[assign[i]]).total_cmp(&d2(&rows[j], &centers[assign[j]])).then(j.cmp(&i)))
                    .expect("rows");
                centers[c] = rows[worst];
                assign[worst] = c;
            }
        }
        let next: Vec<usize> = rows.iter().map(|r| nearest(r, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    hartigan(rows, &mut assign, k);
    let ss = within_cluster_ss(rows, &assign, k);
    (assign, ss)
}

/// Single-point moves that strictly lower the within-cluster sum of squares.
/// Lloyd's fixed points are often not stable under these, so this escapes
/// many of its local optima.
fn hartigan(rows: &[Row], assign: &mut [usize], k: usize) {
    let mut sum = vec![[0.0; 4]; k];
    let mut count = vec![0usize; k];
    for (r, &c) in rows.iter().zip(assign.iter()) {
        for a in 0..4 {
            sum[c][a] += r[a];
        }
        count[c] += 1;
    }
    let mean = |s: &Row, n: usize| s.map(|v| v / n as f64);
    for _ in 0..KMEANS_MAX_ITERS {
        let mut moved = false;
        for (i, r) in rows.iter().enumerate() {
            let from = assign[i];
            if count[from] < 2 {
                continue;
            }
            let nf = count[from] as f64;
            let removal = nf / (nf - 1.0) * d2(r, &mean(&sum[from], count[from]));
            let mut best = (0.0, from);
            for to in (0..k).filter(|&c| c != from) {
                let nt = count[to] as f64;
                let added = if count[to] == 0 { 0.0 } else { nt / (nt + 1.0) * d2(r, &mean(&sum[to], count[to])) };
                let delta = added - removal;
                if delta < best.0 - 1e-12 {
                    best = (delta, to);
                }
            }
            if best.1 != from {
                let to = best.1;
                for a in 0..4 {
                    sum[from][a] -= r[a];
                    sum[to][a] += r[a];
                }
                count[from] -= 1;
                count[to] += 1;
                assign[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// K-means over the given rows: seeded restarts from farthest-point and
/// k-means++ initializations, each run by Lloyd then single-point moves,
/// keeping the lowest within-cluster sum of squares.
pub fn kmeans(rows: &[Row], k: usize, seed: u64) -> Result<(Vec<usize>, f64)> {
    let mut distinct: Vec<&Row> = Vec::new();
    for r in rows {
        if !distinct.iter().any(|d| *d == r) {
            distinct.push(r);
            if distinct.len() >= k {
                break;
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::Degenerate(format!("need at least {k} distinct rows for clustering")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let firsts: Vec<usize> = order.iter().take(KMEANS_RESTARTS).copied().collect();
    for r in 0..2 * KMEANS_RESTARTS {
        let centers = match firsts.get(r) {
            Some(&first) => farthest_point_init(rows, first, k),
            None => d2_sampled_init(rows, k, &mut rng),
        };
        let (a, ss) = lloyd(rows, centers, k);
        if best.as_ref().is_none_or(|b| ss < b.1) {
            best = Some((a, ss));
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters `[xyz, b_r]` rows into three groups; the two with the highest
/// mean saliency are the contacts. The one overlapping predicted right-hand
/// labels more is the right hand.
pub fn cluster_contacts(cloud: &PointCloud, b_r: &SaliencyMap, labels_pred: &ContactLabels, seed: u64) -> Result<ClusterResult> {
    check_len("saliency", cloud.len(), b_r.len())?;
    check_len("labels", cloud.len(), labels_pred.len())?;
    let rows: Vec<Row> = cloud
        .points()
        .iter()
        .zip(b_r.values())
        .map(|(p, &b)| [p[0], p[1], p[2], b])
        .collect();
    let (assignment, inertia) = kmeans(&rows, KMEANS_K, seed)?;
    let members = |c: usize| -> Vec<usize> { (0..rows.len()).filter(|&i| assignment[i] == c).collect() };
    let mut by_mean: Vec<(f64, usize)> = (0..KMEANS_K)
        .map(|c| {
            let m = members(c);
            let mean = if m.is_empty() { f64::NEG_INFINITY } else { b_r.mean_over(&m) };
            (mean, c)
        })
        .collect();
    by_mean.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (hi, lo) = (members(by_mean[0].1), members(by_mean[1].1));
    let overlap = |m: &[usize]| m.iter().filter(|&&i| labels_pred.get(i) == Label::Right).count();
    let (right, left) = if overlap(&lo) > overlap(&hi) { (lo, hi) } else { (hi, lo) };
    Ok(ClusterResult {
        left,
        right,
        assignment,
        inertia,
    })
}

/// Percentage of annotated contact points whose saliency reaches `tau_c`.
pub fn bcacr(b: &SaliencyMap, labels_gt: &ContactLabels, tau_c: f64) -> Result<f64> {
    check_len("labels", b.len(), labels_gt.len())?;
    let annotated = labels_gt.contact_indices();
    if annotated.is_empty() {
        return Err(Error::Empty("no annotated contact points"));
    }
    let covered = annotated.iter().filter(|&&i| b.values()[i] >= tau_c).count();
    Ok(100.0 * covered as f64 / annotated.len() as f64)
}

/// Percentage of single-handed contact points that are also bimanual
/// contacts.
pub fn grasp_coverage(single: &[usize], bimanual: &[usize]) -> Result<f64> {
    if single.is_empty() {
        return Err(Error::Empty("single-handed contact set"));
    }
    let bi: HashSet<usize> = bimanual.iter().copied().collect();
    let single: HashSet<usize> = single.iter().copied().collect();
    Ok(100.0 * single.iter().filter(|i| bi.contains(i)).count() as f64 / single.len() as f64)
}

/// How each contact set is reduced to one point.
#[derive(Clone, Copy, Debug)]
pub enum BalanceMode<'a> {
    /// Highest-saliency member (first index on ties).
    Representative(&'a [f64]),
    /// Mean position of the set.
    Centroid,
}

/// Distance of the midpoint of the two contacts from the gravity line.
pub fn balance_distance(cloud: &PointCloud, left: &[usize], right: &[usize], gravity: &GravityLine, mode: BalanceMode) -> Result<f64> {
    if left.is_empty() {
        return Err(Error::EmptySide(Label::Left.name()));
    }
    if right.is_empty() {
        return Err(Error::EmptySide(Label::Right.name()));
    }
    let pts = cloud.points();
    let reduce = |set: &[usize]| -> Result<Point3> {
        match mode {
            BalanceMode::Representative(b) => {
                check_len("saliency", cloud.len(), b.len())?;
                Ok(pts[losses::hard_select(cloud, b, set)?])
            }
            BalanceMode::Centroid => geom::centroid(&set.iter().map(|&i| pts[i]).collect::<Vec<_>>()),
        }
    };
    Ok(geom::point_line_distance(geom::midpoint(reduce(left)?, reduce(right)?), gravity))
}

/// Contacts of one object after refinement and clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactPrediction {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub refined: SaliencyMap,
    pub balance_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tau: f64,
    pub tau_c: f64,
    pub seed: u64,
    pub refine: RefineConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: DEFAULT_MASK_TAU,
            tau_c: DEFAULT_TAU_C,
            seed: 0,
            refine: RefineConfig::default(),
        }
    }
}

/// Per-object evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub object_id: String,
    pub bcacr: f64,
    pub bcacr_refined: f64,
    pub balance_pre: Option<f64>,
    pub balance_post: Option<f64>,
    pub refine_iterations: usize,
    pub grasp_coverage: Option<f64>,
    pub warnings: Vec<String>,
}

/// Full inference for one object: prediction, refinement, clustering.
pub struct Inference {
    pub prediction: Prediction,
    pub masked: ContactLabels,
    pub refine: Option<RefineOutcome>,
    pub contacts: Option<ContactPrediction>,
    pub warnings: Vec<String>,
}

pub fn infer_object(weights: &ModelWeights, cloud: &PointCloud, s: &SaliencyMap, cfg: &EvalConfig) -> Result<Inference> {
    let prediction = predict(weights, cloud, s)?;
    let masked = mask_labels(&prediction.b, &prediction.labels, cfg.tau)?;
    let gravity = cloud.gravity();
    let mut warnings = Vec::new();
    let refine = match physics_refine(&weights.refine, cloud, &prediction.b, &prediction.labels, &cfg.refine, &gravity) {
        Ok(r) => {
            if !r.converged {
                warnings.push(format!("refinement stopped at distance {:.4} >= w_r", r.final_distance));
            }
            Some(r)
        }
        Err(Error::EmptySide(side)) => {
            warnings.push(format!("refinement skipped: no {side} prediction"));
            None
        }
        Err(e) => return Err(e),
    };
    let refined = refine.as_ref().map(|r| r.b_r.clone()).unwrap_or_else(|| prediction.b.clone());
    let contacts = match cluster_contacts(cloud, &refined, &prediction.labels, cfg.seed) {
        Ok(c) => {
            let dist = balance_distance(cloud, &c.left, &c.right, &gravity, BalanceMode::Representative(refined.values()))?;
            Some(ContactPrediction {
                left: c.left,
                right: c.right,
                refined,
                balance_distance: dist,
            })
        }
        Err(Error::Degenerate(msg)) => {
            warnings.push(format!("clustering skipped: {msg}"));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(Inference {
        prediction,
        masked,
        refine,
        contacts,
        warnings,
    })
}

pub fn evaluate_object(weights: &ModelWeights, id: &str, cloud: &PointCloud, s: &SaliencyMap, labels_gt: &ContactLabels, cfg: &EvalConfig) -> Result<ObjectReport> {
    let inf = infer_object(weights, cloud, s, cfg)?;
    let b = &inf.prediction.b;
    let refined = inf.contacts.as_ref().map(|c| &c.refined).unwrap_or(b);
    let single: Vec<usize> = (0..s.len()).filter(|&i| s.values()[i] >= cfg.tau_c).collect();
    let coverage = match &inf.contacts {
        Some(c) if !single.is_empty() => {
            let both: Vec<usize> = c.left.iter().chain(&c.right).copied().collect();
            Some(grasp_coverage(&single, &both)?)
        }
        _ => None,
    };
    Ok(ObjectReport {
        object_id: id.to_string(),
        bcacr: bcacr(b, labels_gt, cfg.tau_c)?,
        bcacr_refined: bcacr(refined, labels_gt, cfg.tau_c)?,
        balance_pre: inf.refine.as_ref().map(|r| r.initial_distance),
        balance_post: inf.refine.as_ref().map(|r| r.final_distance),
        refine_iterations: inf.refine.as_ref().map_or(0, |r| r.iterations),
        grasp_coverage: coverage,
        warnings: inf.warnings,
    })
}
