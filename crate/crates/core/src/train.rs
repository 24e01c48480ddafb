//! Training loops.
//!
//! [`train_cm`] fits the correction net alone. [`train_joint`] then fits the
//! saliency and contact nets together, periodically replacing each object's
//! working single-handed map with the current bimanual prediction and
//! stopping once every object is both salient on its annotated points and
//! balanced.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{build_vector_gt, ObjectSample, VectorGT, DEFAULT_CANDIDATES};
use crate::error::{check_len, Error, Result};
use crate::geom::{ContactLabels, GravityLine, Label, PointCloud, SaliencyMap};
use crate::losses::{self, LossWeights, Phase, SaliencyTerms};
use crate::nets::{self, graph, ModelWeights, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGradient,
    AdaptiveMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs of correction-net pre-training.
    pub cm_epochs: usize,
    /// Epochs of joint training.
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// First saliency-update epoch.
    pub k: usize,
    /// Epochs between saliency updates.
    pub m: usize,
    /// Cap on the number of saliency updates.
    pub m_max: usize,
    pub sigma_s: f64,
    pub sigma_p: f64,
    pub seed: u64,
    pub n_cand: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub temp_halving_epochs: usize,
    pub temp_floor: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cm_epochs: 2000,
            epochs: 3000,
            lr: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoment,
            k: 2000,
            m: 200,
            m_max: 10,
            sigma_s: 0.8,
            sigma_p: 0.12,
            seed: 0,
            n_cand: DEFAULT_CANDIDATES,
            checkpoint_every: 0,
            temp_halving_epochs: 500,
            temp_floor: 1e-3,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.k < 1 || self.m < 1 {
            return bad("K and M must be at least 1");
        }
        if !(self.sigma_s > 0.0 && self.sigma_s <= 1.0) {
            return bad("sigma_s must lie in (0, 1]");
        }
        if !(self.sigma_p > 0.0) {
            return bad("sigma_p must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.n_cand == 0 {
            return bad("n_cand must be at least 1");
        }
        if !(self.temp_floor > 0.0) {
            return bad("temperature floor must be positive");
        }
        self.loss.validate()
    }

    /// True when a saliency update is due at the end of `epoch` with `t`
    /// updates already applied.
    pub fn is_update_epoch(&self, epoch: usize, t: usize) -> bool {
        t < self.m_max && epoch >= self.k && (epoch - self.k) % self.m == 0
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        losses::annealed_temperature(self.loss.softsel_temp, epoch, self.temp_halving_epochs, self.temp_floor)
    }
}

/// Gradient descent, plain or with adaptive moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates `params` in place. Nothing is modified if any gradient is
    /// non-finite or shapes disagree.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_len("gradients", params.len(), grads.len())?;
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        match self.kind {
            OptimizerKind::PlainGradient => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                check_len("optimizer state", self.m.len(), grads.len())?;
                self.steps += 1;
                let c1 = 1.0 - self.beta1.powi(self.steps);
                let c2 = 1.0 - self.beta2.powi(self.steps);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                        *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One optimizer step on a fresh optimizer.
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[Tensor], kind: OptimizerKind, lr: f64) -> Result<()> {
    Optimizer::new(kind, lr).step(params, grads)
}

/// A training object with its correspondence ground truth.
#[derive(Clone, Debug)]
pub struct TrainObject {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: ContactLabels,
    /// Raw single-handed saliency (correction-net input).
    pub s_o: SaliencyMap,
    pub gt: VectorGT,
    pub gravity: GravityLine,
}

impl TrainObject {
    pub fn new(sample: ObjectSample, n_cand: usize, seed: u64) -> Result<Self> {
        check_len("labels", sample.cloud.len(), sample.labels.len())?;
        check_len("saliency", sample.cloud.len(), sample.saliency.len())?;
        let gt = build_vector_gt(&sample.cloud, &sample.labels, n_cand, seed)?;
        Ok(TrainObject {
            id: sample.id,
            gravity: sample.cloud.gravity(),
            cloud: sample.cloud,
            labels: sample.labels,
            s_o: sample.saliency,
            gt,
        })
    }
}

pub fn prepare(samples: Vec<ObjectSample>, n_cand: usize, seed: u64) -> Result<Vec<TrainObject>> {
    samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| TrainObject::new(s, n_cand, seed.wrapping_add(i as u64)))
        .collect()
}

fn with_context(e: Error, epoch: usize, id: &str) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch}, object {id})")),
        other => other,
    }
}

fn visiting_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn save_checkpoint(dir: Option<&Path>, every: usize, epoch: usize, tag: &str, w: &ModelWeights) -> Result<()> {
    if let Some(dir) = dir {
        if every > 0 && epoch % every == 0 {
            std::fs::create_dir_all(dir)?;
            w.save(&dir.join(format!("{tag}-epoch{epoch:06}.bgsw")))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmRecord {
    pub epoch: usize,
    pub loss: f64,
}

fn gradients(g: &Graph, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Fits the correction net so right-hand points become salient and the rest
/// do not. Returns the mean per-object loss of every epoch, measured before
/// that epoch's updates.
pub fn train_cm(objects: &[TrainObject], cfg: &TrainConfig, weights: &mut ModelWeights, checkpoints: Option<&Path>) -> Result<Vec<CmRecord>> {
    cfg.validate()?;
    if objects.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for o in objects {
        if o.labels.count(Label::Right) == 0 {
            return Err(Error::EmptySide(Label::Right.name()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.cm_epochs);
    for epoch in 1..=cfg.cm_epochs {
        let mut total = 0.0;
        for i in visiting_order(objects.len(), &mut rng) {
            let o = &objects[i];
            let step = || -> Result<(f64, Vec<Tensor>)> {
                let mut g = Graph::new();
                let net = weights.cm.net.bind(&mut g, true);
                let s = graph::correction(&mut g, &net, &o.cloud, o.s_o.values())?;
                let loss = losses::correct(&mut g, s, &o.labels)?;
                Ok((g.value(loss).item(), gradients(&g, loss, &net.vars())?))
            };
            let (loss, grads) = step().map_err(|e| with_context(e, epoch, &o.id))?;
            total += loss;
            opt.step(&mut weights.group_params_mut(ParamGroup::Correction), &grads)
                .map_err(|e| with_context(e, epoch, &o.id))?;
        }
        let loss = total / objects.len() as f64;
        log::debug!("cm epoch {epoch}: loss {loss:.6}");
        trace.push(CmRecord { epoch, loss });
        save_checkpoint(checkpoints, cfg.checkpoint_every, epoch, "cm", weights)?;
    }
    Ok(trace)
}

/// Working state of the iterative strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Working single-handed map per object.
    pub s: Vec<SaliencyMap>,
    /// Saliency updates applied so far.
    pub t: usize,
    pub epoch: usize,
    pub stopped: bool,
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(s: Vec<SaliencyMap>) -> Self {
        TrainState {
            s,
            t: 0,
            epoch: 0,
            stopped: false,
            history: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        if self.t == 0 {
            Phase::PreIteration
        } else {
            Phase::Iteration
        }
    }
}

/// Replaces the working maps with the current bimanual maps. Fails unless an
/// update is due at `state.epoch`.
pub fn apply_saliency_update(state: &mut TrainState, b_current: Vec<SaliencyMap>, cfg: &TrainConfig) -> Result<()> {
    if !cfg.is_update_epoch(state.epoch, state.t) {
        return Err(Error::Schedule(format!(
            "no saliency update is due at epoch {} after {} of {} updates (K={}, M={})",
            state.epoch, state.t, cfg.m_max, cfg.k, cfg.m
        )));
    }
    check_len("saliency maps", state.s.len(), b_current.len())?;
    for (s, b) in state.s.iter().zip(&b_current) {
        check_len("saliency", s.len(), b.len())?;
    }
    state.s = b_current;
    state.t += 1;
    Ok(())
}

/// Per-object stop-rule inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopCheck {
    pub mean_labeled_b: f64,
    pub balance_distance: f64,
    pub pass: bool,
}

pub fn stop_inputs(b: &SaliencyMap, labels: &ContactLabels, cloud: &PointCloud, gravity: &GravityLine) -> Result<(f64, f64)> {
    check_len("saliency", cloud.len(), b.len())?;
    let mean = b.mean_over(&labels.contact_indices());
    let dist = losses::hard_balance_lr(cloud, b.values(), labels, gravity)?;
    Ok((mean, dist))
}

/// Mean saliency over annotated points at least `sigma_s`, and the
/// highest-saliency left/right pair closer than `sigma_p` to the gravity
/// line.
pub fn check_stop(b: &SaliencyMap, labels: &ContactLabels, cloud: &PointCloud, gravity: &GravityLine, sigma_s: f64, sigma_p: f64) -> Result<bool> {
    let (mean, dist) = stop_inputs(b, labels, cloud, gravity)?;
    Ok(stop_rule(mean, dist, sigma_s, sigma_p))
}

pub fn stop_rule(mean_labeled_b: f64, balance_distance: f64, sigma_s: f64, sigma_p: f64) -> bool {
    mean_labeled_b >= sigma_s && balance_distance < sigma_p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    /// Updates applied including this one.
    pub t: usize,
    pub checks: Vec<StopCheck>,
    pub stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub temp: f64,
    /// The optimized objective: weighted cross-entropy plus `total`.
    pub loss: f64,
    pub total: f64,
    pub correspondence: f64,
    pub agreement: f64,
    pub consistency: f64,
    pub balance: f64,
    pub cross_entropy: f64,
    /// Updates applied before this epoch's steps.
    pub t: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update: Option<UpdateEvent>,
}

#[derive(Clone, Debug)]
pub struct JointReport {
    pub trace: Vec<JointRecord>,
    pub state: TrainState,
}

impl JointReport {
    pub fn update_epochs(&self) -> Vec<usize> {
        self.trace.iter().filter(|r| r.update.is_some()).map(|r| r.epoch).collect()
    }

    pub fn stop_epoch(&self) -> Option<usize> {
        self.trace.iter().find(|r| r.update.as_ref().is_some_and(|u| u.stop)).map(|r| r.epoch)
    }
}

/// Current bimanual map for one object from the adjustment branch.
fn current_b(weights: &ModelWeights, o: &TrainObject, s: &SaliencyMap) -> Result<SaliencyMap> {
    nets::bspn_adjust(weights, &o.cloud, s)
}

/// Initial working maps: the correction net applied to each object's raw
/// single-handed saliency.
pub fn corrected_maps(objects: &[TrainObject], weights: &ModelWeights) -> Result<Vec<SaliencyMap>> {
    objects.iter().map(|o| nets::cm_forward(weights, &o.cloud, &o.s_o)).collect()
}

#[derive(Default)]
struct Sums {
    loss: f64,
    total: f64,
    lc: f64,
    la1: f64,
    la2: f64,
    lp: f64,
    ce: f64,
}

/// Trains the saliency and contact nets together from the working maps
/// `s_init` (normally [`corrected_maps`]).
pub fn train_joint(
    objects: &[TrainObject],
    s_init: Vec<SaliencyMap>,
    cfg: &TrainConfig,
    weights: &mut ModelWeights,
    checkpoints: Option<&Path>,
) -> Result<JointReport> {
    cfg.validate()?;
    if objects.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_len("initial saliency maps", objects.len(), s_init.len())?;
    for (o, s) in objects.iter().zip(&s_init) {
        check_len("initial saliency", o.cloud.len(), s.len())?;
        o.labels.require_bimanual()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4A01);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut state = TrainState::new(s_init);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let n_obj = objects.len() as f64;

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let phase = state.phase();
        let temp = cfg.temperature(epoch - 1);
        let mut sums = Sums::default();
        for i in visiting_order(objects.len(), &mut rng) {
            let o = &objects[i];
            let s = &state.s[i];
            let step = || -> Result<(Sums, Vec<Tensor>)> {
                let mut g = Graph::new();
                let vnet = weights.bspn.vectors.bind(&mut g, true);
                let anet = weights.bspn.adjust.bind(&mut g, true);
                let cnet = weights.bcpn.net.bind(&mut g, true);
                let sv = g.constant(Tensor::vector(s.values().to_vec()));
                let out = graph::bspn(&mut g, Some(&vnet), &anet, &o.cloud, sv)?;
                let v = out.vectors.expect("vector branch bound");
                let targets = losses::nearest_targets(g.value(v), &o.gt, &o.labels)?;
                let terms = SaliencyTerms {
                    cloud: &o.cloud,
                    labels: &o.labels,
                    gravity: &o.gravity,
                    s: sv,
                    b: out.b,
                    v,
                    targets: &targets,
                    phase,
                    temp,
                };
                let parts = losses::total(&mut g, &terms, &cfg.loss)?;
                let logits = graph::bcpn(&mut g, &cnet, &o.cloud, out.b)?;
                let loss = losses::classify(&mut g, logits, &o.labels, parts.total, cfg.loss.w4)?;
                let mut vars = vnet.vars();
                vars.extend(anet.vars());
                vars.extend(cnet.vars());
                let val = |x: Var| g.value(x).item();
                let sums = Sums {
                    loss: val(loss),
                    total: val(parts.total),
                    lc: val(parts.correspondence),
                    la1: val(parts.agreement),
                    la2: val(parts.consistency),
                    lp: val(parts.balance),
                    ce: if cfg.loss.w4 > 0.0 {
                        (val(loss) - val(parts.total)) / cfg.loss.w4
                    } else {
                        0.0
                    },
                };
                Ok((sums, gradients(&g, loss, &vars)?))
            };
            let (part, grads) = step().map_err(|e| with_context(e, epoch, &o.id))?;
            sums.loss += part.loss;
            sums.total += part.total;
            sums.lc += part.lc;
            sums.la1 += part.la1;
            sums.la2 += part.la2;
            sums.lp += part.lp;
            sums.ce += part.ce;
            opt.step(&mut weights.group_params_mut(ParamGroup::Joint), &grads)
                .map_err(|e| with_context(e, epoch, &o.id))?;
        }
        let mut rec = JointRecord {
            epoch,
            phase,
            temp,
            loss: sums.loss / n_obj,
            total: sums.total / n_obj,
            correspondence: sums.lc / n_obj,
            agreement: sums.la1 / n_obj,
            consistency: sums.la2 / n_obj,
            balance: sums.lp / n_obj,
            cross_entropy: sums.ce / n_obj,
            t: state.t,
            update: None,
        };
        state.history.push(rec.loss);

        if cfg.is_update_epoch(epoch, state.t) {
            let b: Vec<SaliencyMap> = objects
                .iter()
                .zip(&state.s)
                .map(|(o, s)| current_b(weights, o, s))
                .collect::<Result<_>>()?;
            apply_saliency_update(&mut state, b, cfg)?;
            let checks = objects
                .iter()
                .zip(&state.s)
                .map(|(o, b)| {
                    let (mean, dist) = stop_inputs(b, &o.labels, &o.cloud, &o.gravity)?;
                    Ok(StopCheck {
                        mean_labeled_b: mean,
                        balance_distance: dist,
                        pass: stop_rule(mean, dist, cfg.sigma_s, cfg.sigma_p),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let stop = checks.iter().all(|c| c.pass);
            log::info!("epoch {epoch}: saliency update {} of at most {}, stop={stop}", state.t, cfg.m_max);
            rec.update = Some(UpdateEvent { t: state.t, checks, stop });
            state.stopped = stop;
        }
        log::debug!("joint epoch {epoch}: loss {:.6} total {:.6}", rec.loss, rec.total);
        trace.push(rec);
        save_checkpoint(checkpoints, cfg.checkpoint_every, epoch, "joint", weights)?;
        if state.stopped {
            break;
        }
    }
    Ok(JointReport { trace, state })
}

/// Writes records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
