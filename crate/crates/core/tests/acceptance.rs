//! Acceptance gate. Runs every criterion and prints one PASS/FAIL line each.
//! Failures are reported in the output; set `BISAL_ACCEPTANCE_STRICT=1` to
//! also make the process exit nonzero.
//!
//! `cargo test -p bisal-core --test acceptance -- 3 7` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bisal_core::autodiff::{Graph, Tensor, Var};
use bisal_core::data::annotations::{annotations_to_string, parse_annotations, AnnotationRecord};
use bisal_core::data::ply::{read_ply, write_ply, PlyData, PlyEncoding};
use bisal_core::data::{build_vector_gt, gen_object, Category, ObjectSample};
use bisal_core::geom::{self, ContactLabels, GravityLine, Label, Point3, PointCloud, SaliencyMap};
use bisal_core::losses::{self, LossWeights, Phase, SaliencyTerms};
use bisal_core::nets::{self, graph, EncoderDecoderVars, ModelWeights, NetConfig, ParamGroup};
use bisal_core::pipeline::{self, BalanceMode, RefineConfig};
use bisal_core::train::{self, TrainConfig, TrainObject};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

struct Bound {
    cm: EncoderDecoderVars,
    vectors: EncoderDecoderVars,
    adjust: EncoderDecoderVars,
    bcpn: EncoderDecoderVars,
}

fn bind_all(g: &mut Graph, w: &ModelWeights) -> Bound {
    Bound {
        cm: w.cm.net.bind(g, true),
        vectors: w.bspn.vectors.bind(g, true),
        adjust: w.bspn.adjust.bind(g, true),
        bcpn: w.bcpn.net.bind(g, true),
    }
}

fn group_vars(b: &Bound, group: ParamGroup) -> Vec<Var> {
    match group {
        ParamGroup::Correction => b.cm.vars(),
        ParamGroup::Joint => {
            let mut v = b.vectors.vars();
            v.extend(b.adjust.vars());
            v.extend(b.bcpn.vars());
            v
        }
        ParamGroup::Refine => unreachable!("refine net is not part of the training losses"),
    }
}

type LossFn<'a> = dyn Fn(&mut Graph, &Bound) -> bisal_core::Result<Var> + 'a;

fn eval_loss(w: &ModelWeights, f: &LossFn) -> f64 {
    let mut g = Graph::new();
    let b = bind_all(&mut g, w);
    let out = f(&mut g, &b).unwrap();
    g.value(out).item()
}

/// Worst `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)` over every
/// parameter of `group`, with central differences of step `eps`.
fn param_grad_check(w: &ModelWeights, group: ParamGroup, eps: f64, f: &LossFn) -> (f64, usize) {
    const FLOOR: f64 = 1e-4;
    let mut g = Graph::new();
    let bound = bind_all(&mut g, w);
    let out = f(&mut g, &bound).unwrap();
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Tensor> = group_vars(&bound, group).iter().map(|&v| grads.wrt(v)).collect();

    let mut work = w.clone();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (pi, a) in analytic.iter().enumerate() {
        for c in 0..a.len() {
            let orig = work.group_params_mut(group)[pi].data()[c];
            work.group_params_mut(group)[pi].data_mut()[c] = orig + eps;
            let plus = eval_loss(&work, f);
            work.group_params_mut(group)[pi].data_mut()[c] = orig - eps;
            let minus = eval_loss(&work, f);
            work.group_params_mut(group)[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let an = a.data()[c];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
            count += 1;
        }
    }
    (worst, count)
}

/// Seeded weights with every parameter nudged, so no layer starts at zero.
fn jittered_weights(cfg: &NetConfig, seed: u64, scale: f64) -> ModelWeights {
    let mut w = ModelWeights::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    for group in [ParamGroup::Correction, ParamGroup::Joint, ParamGroup::Refine] {
        for t in w.group_params_mut(group) {
            for v in t.data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
    w
}

fn strictly_inside(values: &[f64]) -> bool {
    values.iter().all(|&v| v > 0.0 && v < 1.0)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let o = gen_object(Category::Mug, 11, 64).unwrap();
    let cloud = o.cloud;
    let labels = o.labels;
    let gravity = cloud.gravity();
    // Keep every map away from the clamp bounds so the losses are smooth.
    let s_vals: Vec<f64> = o.s_o.values().iter().map(|v| 0.2 + 0.6 * v).collect();
    let s_map = SaliencyMap::new(s_vals.clone()).unwrap();
    let w = jittered_weights(&NetConfig::tiny_smooth(), 5, 0.05);
    let gt = build_vector_gt(&cloud, &labels, 20, 3).unwrap();
    let pred = nets::bspn_forward(&w, &cloud, &s_map).unwrap();
    let targets = losses::nearest_targets(&pred.vectors, &gt, &labels).unwrap();
    let cm = nets::cm_forward(&w, &cloud, &s_map).unwrap();
    let clamp_free = strictly_inside(cm.values()) && strictly_inside(pred.b.values());
    let weights = LossWeights::default();

    let bspn = |g: &mut Graph, b: &Bound| -> bisal_core::Result<(Var, Var, Var)> {
        let sv = g.constant(Tensor::vector(s_vals.clone()));
        let out = graph::bspn(g, Some(&b.vectors), &b.adjust, &cloud, sv)?;
        Ok((sv, out.b, out.vectors.expect("vector branch")))
    };
    let total = |g: &mut Graph, b: &Bound| -> bisal_core::Result<Var> {
        let (sv, bm, v) = bspn(g, b)?;
        let terms = SaliencyTerms {
            cloud: &cloud,
            labels: &labels,
            gravity: &gravity,
            s: sv,
            b: bm,
            v,
            targets: &targets,
            phase: Phase::PreIteration,
            temp: 0.1,
        };
        Ok(losses::total(g, &terms, &weights)?.total)
    };

    let cases: Vec<(&str, ParamGroup, Box<LossFn>)> = vec![
        (
            "L_correct",
            ParamGroup::Correction,
            Box::new(|g: &mut Graph, b: &Bound| {
                let s = graph::correction(g, &b.cm, &cloud, &s_vals)?;
                losses::correct(g, s, &labels)
            }),
        ),
        (
            "L_c",
            ParamGroup::Joint,
            Box::new(|g: &mut Graph, b: &Bound| {
                let (_, _, v) = bspn(g, b)?;
                losses::correspondence(g, v, &targets, &labels)
            }),
        ),
        (
            "L_a1",
            ParamGroup::Joint,
            Box::new(|g: &mut Graph, b: &Bound| {
                let (_, bm, v) = bspn(g, b)?;
                losses::pair_agreement(g, bm, v, &cloud, &labels)
            }),
        ),
        (
            "L_a2",
            ParamGroup::Joint,
            Box::new(|g: &mut Graph, b: &Bound| {
                let (sv, bm, _) = bspn(g, b)?;
                let pre = losses::consistency(g, bm, sv, &labels, Phase::PreIteration)?;
                let it = losses::consistency(g, bm, sv, &labels, Phase::Iteration)?;
                let it = g.scale(it, 0.5)?;
                g.add(pre, it)
            }),
        ),
        (
            "L_p",
            ParamGroup::Joint,
            Box::new(|g: &mut Graph, b: &Bound| {
                let (_, bm, _) = bspn(g, b)?;
                losses::balance(g, &cloud, bm, &labels, &gravity, 0.1)
            }),
        ),
        ("L_total", ParamGroup::Joint, Box::new(total)),
        (
            "L_classify",
            ParamGroup::Joint,
            Box::new(|g: &mut Graph, b: &Bound| {
                let t = total(g, b)?;
                let (_, bm, _) = bspn(g, b)?;
                let logits = graph::bcpn(g, &b.bcpn, &cloud, bm)?;
                losses::classify(g, logits, &labels, t, weights.w4)
            }),
        ),
    ];

    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, group, f) in &cases {
        let (err, n) = param_grad_check(&w, *group, 1e-6, f.as_ref());
        worst = worst.max(err);
        parts.push(format!("{name} {err:.1e}/{n}p"));
    }
    let elapsed = start.elapsed();
    let pass = clamp_free && worst <= 1e-5 && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "max rel err {worst:.2e} (<= 1e-5), clamp inactive {clamp_free}, {} [{}]",
            secs(elapsed),
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Perfect-fit zeros

fn criterion_2() -> Outcome {
    // Right at +x, left at -x: their midpoint lies on the gravity line.
    let pts: Vec<Point3> = vec![
        [0.3, 0.0, 0.1],
        [-0.3, 0.0, 0.1],
        [0.0, 0.2, -0.1],
        [0.1, -0.2, 0.0],
        [-0.1, 0.1, 0.2],
        [0.2, 0.2, -0.2],
    ];
    let cloud = PointCloud::new(pts.clone()).unwrap();
    let labels = ContactLabels::from_u8(&[1, 2, 0, 0, 0, 0]).unwrap();
    let gravity = GravityLine::downward_through([0.0; 3]);
    let n = pts.len();
    let targets: Vec<Option<Point3>> = (0..n)
        .map(|i| match i {
            0 => Some(geom::sub(pts[1], pts[0])),
            1 => Some(geom::sub(pts[0], pts[1])),
            _ => None,
        })
        .collect();
    let v_rows: Vec<f64> = targets.iter().flat_map(|t| t.unwrap_or([0.0; 3])).collect();
    let v = Tensor::matrix(n, 3, v_rows).unwrap();
    let s_correct: Vec<f64> = (0..n).map(|i| (i == 0) as u8 as f64).collect();
    let uniform = vec![0.6; n];

    let mut values = vec![
        ("L_correct", losses::l_correct(&s_correct, &labels).unwrap()),
        ("L_c", losses::l_c(&v, &targets, &labels).unwrap()),
        ("L_a1", losses::l_a1(&uniform, &v, &cloud, &labels).unwrap()),
        ("L_a2 pre", losses::l_a2(&uniform, &uniform, &labels, Phase::PreIteration).unwrap()),
        ("L_a2 iter", losses::l_a2(&uniform, &uniform, &labels, Phase::Iteration).unwrap()),
        ("L_p", losses::l_p(&cloud, &uniform, &labels, &gravity, 0.1).unwrap()),
    ];

    let mut g = Graph::new();
    let sv = g.constant(Tensor::vector(uniform.clone()));
    let bv = g.constant(Tensor::vector(uniform.clone()));
    let vv = g.constant(v.clone());
    let terms = SaliencyTerms {
        cloud: &cloud,
        labels: &labels,
        gravity: &gravity,
        s: sv,
        b: bv,
        v: vv,
        targets: &targets,
        phase: Phase::PreIteration,
        temp: 0.1,
    };
    let tot = losses::total(&mut g, &terms, &LossWeights::default()).unwrap().total;
    let logits: Vec<f64> = labels
        .as_slice()
        .iter()
        .flat_map(|&l| {
            let mut row = [0.0; 3];
            row[l as usize] = 1e3;
            row
        })
        .collect();
    let lg = g.constant(Tensor::matrix(n, 3, logits).unwrap());
    let cls = losses::classify(&mut g, lg, &labels, tot, 1.5).unwrap();
    values.push(("L_total", g.value(tot).item()));
    values.push(("L_classify", g.value(cls).item()));

    let worst = values.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let listed: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    outcome(worst <= 1e-12, format!("max |loss| {worst:.1e} (<= 1e-12) [{}]", listed.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Iterative-strategy schedule

fn toy_objects(category: Category, seeds: &[u64], n: usize, n_cand: usize) -> Vec<TrainObject> {
    let samples = seeds
        .iter()
        .map(|&seed| {
            let o = gen_object(category, seed, n).unwrap();
            ObjectSample {
                id: format!("{category}-{seed}"),
                cloud: o.cloud,
                labels: o.labels,
                saliency: o.s_o,
            }
        })
        .collect();
    train::prepare(samples, n_cand, 0).unwrap()
}

fn criterion_3() -> Outcome {
    let objs = toy_objects(Category::Mug, &[21, 22], 96, 20);
    let cfg = TrainConfig {
        epochs: 420,
        k: 200,
        m: 50,
        m_max: 4,
        n_cand: 20,
        ..TrainConfig::default()
    };
    let mut w = ModelWeights::init(&NetConfig::tiny_smooth(), 2).unwrap();
    let s = train::corrected_maps(&objs, &w).unwrap();
    let report = train::train_joint(&objs, s, &cfg, &mut w, None).unwrap();
    let updates = report.update_epochs();
    let want = [200, 250, 300, 350];
    let schedule_ok = match report.stop_epoch() {
        None => updates == want,
        Some(stop) => !updates.is_empty() && want.starts_with(&updates) && updates.last() == Some(&stop),
    };
    let first = updates.first().copied().unwrap_or(usize::MAX);
    let phases_ok = report.trace.iter().all(|r| {
        let want = if r.epoch <= first { Phase::PreIteration } else { Phase::Iteration };
        r.phase == want
    });
    let counts_ok = report
        .trace
        .iter()
        .all(|r| r.t == updates.iter().filter(|&&e| e < r.epoch).count());
    outcome(
        schedule_ok && phases_ok && counts_ok,
        format!(
            "updates at {updates:?} (stop {:?}), phase switch after first update {phases_ok}, update counter consistent {counts_ok}",
            report.stop_epoch()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Stop rule

fn loop_line_distance(p: Point3, line: &GravityLine) -> f64 {
    let o = line.origin();
    let d = line.direction();
    let r = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
    // |r x d| for a unit direction.
    let c = [r[1] * d[2] - r[2] * d[1], r[2] * d[0] - r[0] * d[2], r[0] * d[1] - r[1] * d[0]];
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

fn loop_argmax(b: &[f64], labels: &[u8], side: u8) -> usize {
    let mut best = usize::MAX;
    for i in 0..b.len() {
        if labels[i] == side && (best == usize::MAX || b[i] > b[best]) {
            best = i;
        }
    }
    best
}

fn criterion_4() -> Outcome {
    let table = [
        (0.9, 0.05, true),
        (0.9, 0.20, false),
        (0.5, 0.05, false),
        (0.5, 0.20, false),
    ];
    let table_ok = table.iter().all(|&(m, d, want)| train::stop_rule(m, d, 0.8, 0.12) == want);

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut agree, mut trues) = (0, 0);
    for k in 0..100 {
        let n = rng.gen_range(6..40);
        let pts: Vec<Point3> = (0..n)
            .map(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)])
            .collect();
        let mut raw: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        raw[0] = 1;
        raw[1] = 2;
        let high = k % 2 == 0;
        let b: Vec<f64> = raw
            .iter()
            .map(|&l| if high && l != 0 { rng.gen_range(0.6..1.0) } else { rng.gen::<f64>() })
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let labels = ContactLabels::from_u8(&raw).unwrap();
        let gravity = cloud.gravity();
        let got = train::check_stop(&SaliencyMap::new(b.clone()).unwrap(), &labels, &cloud, &gravity, 0.8, 0.12).unwrap();

        let (mut sum, mut cnt) = (0.0, 0);
        for i in 0..n {
            if raw[i] != 0 {
                sum += b[i];
                cnt += 1;
            }
        }
        let (l, r) = (loop_argmax(&b, &raw, 2), loop_argmax(&b, &raw, 1));
        let mid = [
            (pts[l][0] + pts[r][0]) / 2.0,
            (pts[l][1] + pts[r][1]) / 2.0,
            (pts[l][2] + pts[r][2]) / 2.0,
        ];
        let want = sum / cnt as f64 >= 0.8 && loop_line_distance(mid, &gravity) < 0.12;
        agree += (got == want) as usize;
        trues += want as usize;
    }
    outcome(
        table_ok && agree == 100,
        format!("truth table {table_ok}, random agreement {agree}/100 ({trues} true cases)"),
    )
}

// ---------------------------------------------------------------------------
// 5. Overfit sanity

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let objs = toy_objects(Category::Mug, &[31], 256, 200);
    let cfg = TrainConfig {
        cm_epochs: 3000,
        epochs: 3000,
        n_cand: 200,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut w = ModelWeights::init(&NetConfig::compact(), 5).unwrap();
    let cm = train::train_cm(&objs, &cfg, &mut w, None).unwrap();
    let after_cm = w.clone();
    let s = train::corrected_maps(&objs, &w).unwrap();
    let joint = train::train_joint(&objs, s, &cfg, &mut w, None).unwrap();
    let elapsed = start.elapsed();

    let cm_first = cm[0].loss;
    let cm_last = losses::l_correct(train::corrected_maps(&objs, &w).unwrap()[0].values(), &objs[0].labels).unwrap();
    let j_first = joint.trace[0].loss;
    let j_last = joint.trace.last().unwrap().loss;
    let cm_ratio = cm_last / cm_first;
    let j_ratio = j_last / j_first;

    // Same seeds, shorter runs of each stage from the same starting weights:
    // both must reproduce the prefix of the full traces.
    let short = TrainConfig {
        cm_epochs: 120,
        epochs: 120,
        ..cfg.clone()
    };
    let mut w2 = ModelWeights::init(&NetConfig::compact(), 5).unwrap();
    let cm2 = train::train_cm(&objs, &short, &mut w2, None).unwrap();
    let mut w3 = after_cm;
    let s3 = train::corrected_maps(&objs, &w3).unwrap();
    let joint2 = train::train_joint(&objs, s3, &short, &mut w3, None).unwrap();
    let deterministic = cm2[..] == cm[..120] && joint2.trace[..] == joint.trace[..120];

    let pass = cm_ratio <= 0.1 && j_ratio <= 0.1 && deterministic && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "correction loss {cm_first:.4} -> {cm_last:.2e} ({:.1}%), joint objective {j_first:.4} -> {j_last:.4} ({:.1}%, {} epochs), deterministic {deterministic}, {}",
            100.0 * cm_ratio,
            100.0 * j_ratio,
            joint.trace.len(),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Refinement efficacy

/// Right-hand points salient; among the rest, only a bump next to the right
/// contact, so the best pair sits on one side of the object.
fn skewed_saliency(cloud: &PointCloud, labels: &ContactLabels) -> SaliencyMap {
    let right = labels.indices(Label::Right);
    let rc = geom::centroid(&right.iter().map(|&i| cloud.points()[i]).collect::<Vec<_>>()).unwrap();
    let b = (0..cloud.len())
        .map(|i| {
            if labels.get(i) == Label::Right {
                0.9
            } else {
                0.8 * (-geom::dist(cloud.points()[i], rc).powi(2) / 0.02).exp()
            }
        })
        .collect();
    SaliencyMap::new(b).unwrap()
}

fn criterion_6() -> Outcome {
    let cfg = RefineConfig::default();
    let mut objects = Vec::new();
    let mut seed = 600;
    while objects.len() < 20 {
        let cat = Category::ALL[objects.len() % Category::ALL.len()];
        let o = gen_object(cat, seed, 600).unwrap();
        seed += 1;
        let b = skewed_saliency(&o.cloud, &o.labels);
        let others: Vec<usize> = (0..o.cloud.len()).filter(|&i| o.labels.get(i) != Label::Right).collect();
        let d0 = losses::hard_balance(&o.cloud, b.values(), &o.labels.indices(Label::Right), &others, &o.cloud.gravity()).unwrap();
        // Only deliberately unbalanced inputs count.
        if d0 >= cfg.w_r {
            objects.push((format!("{cat}-{}", seed - 1), o, b));
        }
    }
    let w = ModelWeights::init(&NetConfig::compact(), 0).unwrap();
    let (mut ok, mut monotone, mut slowest) = (0, 0, Duration::ZERO);
    let mut failures = Vec::new();
    for (id, o, b) in &objects {
        let t = Instant::now();
        let r = pipeline::physics_refine(&w.refine, &o.cloud, b, &o.labels, &cfg, &o.cloud.gravity()).unwrap();
        slowest = slowest.max(t.elapsed());
        let acc = r.accepted_objectives();
        monotone += acc.windows(2).all(|p| p[1] <= p[0]) as usize;
        if r.final_distance < cfg.w_r && r.iterations <= cfg.max_iters {
            ok += 1;
        } else {
            failures.push(format!("{id} {:.3}", r.final_distance));
        }
    }
    let pass = ok >= 18 && monotone == 20 && slowest < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "{ok}/20 below w_r=0.12 (need 18), monotone traces {monotone}/20, slowest {}{}",
            secs(slowest),
            if failures.is_empty() { String::new() } else { format!(", missed: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Metric oracles

fn random_map(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    // Coarse values so ties and threshold hits actually occur.
    let b = (0..n).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
    let l = (0..n).map(|_| rng.gen_range(0..3)).collect();
    (b, l)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut bc, mut cov, mut mask, mut bal) = (0, 0, 0, 0);

    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let (b, mut raw) = random_map(n, &mut rng);
        raw[0] = rng.gen_range(1..3);
        let (mut c, mut covered) = (0usize, 0usize);
        for i in 0..n {
            if raw[i] == 1 || raw[i] == 2 {
                c += 1;
                if b[i] >= 0.7 {
                    covered += 1;
                }
            }
        }
        let want = 100.0 * covered as f64 / c as f64;
        let got = pipeline::bcacr(&SaliencyMap::new(b).unwrap(), &ContactLabels::from_u8(&raw).unwrap(), 0.7).unwrap();
        bc += (got == want) as usize;
    }

    for _ in 0..1000 {
        let n = rng.gen_range(1..80);
        let single: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
        let single = if single.is_empty() { vec![rng.gen_range(0..n)] } else { single };
        let both: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
        let mut hit = 0;
        for s in &single {
            if both.contains(s) {
                hit += 1;
            }
        }
        let want = 100.0 * hit as f64 / single.len() as f64;
        cov += (pipeline::grasp_coverage(&single, &both).unwrap() == want) as usize;
    }

    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let (b, raw) = random_map(n, &mut rng);
        let tau = rng.gen_range(0..=20) as f64 / 20.0;
        let want: Vec<u8> = (0..n).map(|i| if b[i] >= tau { raw[i] } else { 0 }).collect();
        let got = pipeline::mask_labels(&SaliencyMap::new(b).unwrap(), &ContactLabels::from_u8(&raw).unwrap(), tau).unwrap();
        mask += (got.to_u8() == want) as usize;
    }

    for k in 0..1000 {
        let n = rng.gen_range(3..40);
        let pts: Vec<Point3> = (0..n)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
            .collect();
        let (b, _) = random_map(n, &mut rng);
        let split = rng.gen_range(1..n);
        let left: Vec<usize> = (0..split).collect();
        let right: Vec<usize> = (split..n).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let gravity = cloud.gravity();
        let (want, got) = if k % 2 == 0 {
            let pick = |set: &[usize]| {
                let mut best = set[0];
                for &i in set {
                    if b[i] > b[best] {
                        best = i;
                    }
                }
                pts[best]
            };
            let (l, r) = (pick(&left), pick(&right));
            let mid = [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0, (l[2] + r[2]) / 2.0];
            (
                loop_line_distance(mid, &gravity),
                pipeline::balance_distance(&cloud, &left, &right, &gravity, BalanceMode::Representative(&b)).unwrap(),
            )
        } else {
            let mean = |set: &[usize]| {
                let mut acc = [0.0; 3];
                for &i in set {
                    for d in 0..3 {
                        acc[d] += pts[i][d];
                    }
                }
                [acc[0] / set.len() as f64, acc[1] / set.len() as f64, acc[2] / set.len() as f64]
            };
            let (l, r) = (mean(&left), mean(&right));
            let mid = [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0, (l[2] + r[2]) / 2.0];
            (
                loop_line_distance(mid, &gravity),
                pipeline::balance_distance(&cloud, &left, &right, &gravity, BalanceMode::Centroid).unwrap(),
            )
        };
        bal += ((got - want).abs() <= 1e-12) as usize;
    }

    let pass = bc == 1000 && cov == 1000 && mask == 1000 && bal == 1000;
    outcome(
        pass,
        format!("bcacr {bc}/1000, grasp_coverage {cov}/1000, mask_labels {mask}/1000, balance_distance {bal}/1000 (within 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// 8. Desk-scale BCACR and ablation ordering

/// Desk-scale run: the default training schedule on 256-point clouds with
/// the compact network.
const DESK_POINTS: usize = 256;

fn desk_config() -> TrainConfig {
    TrainConfig::default()
}

struct DeskResult {
    bcacr: f64,
    distance: f64,
}

impl DeskResult {
    fn composite(&self) -> f64 {
        self.bcacr / 100.0 - self.distance / 0.12
    }
}

fn desk_run(objs: &[TrainObject], cfg: &TrainConfig) -> DeskResult {
    let mut w = ModelWeights::init(&NetConfig::compact(), 0).unwrap();
    train::train_cm(objs, cfg, &mut w, None).unwrap();
    let s = train::corrected_maps(objs, &w).unwrap();
    train::train_joint(objs, s.clone(), cfg, &mut w, None).unwrap();
    let (mut bc, mut dist) = (0.0, 0.0);
    for (o, s) in objs.iter().zip(&s) {
        let p = pipeline::predict(&w, &o.cloud, s).unwrap();
        bc += pipeline::bcacr(&p.b, &o.labels, 0.7).unwrap();
        dist += pipeline::balance_distance(
            &o.cloud,
            &o.labels.indices(Label::Left),
            &o.labels.indices(Label::Right),
            &o.gravity,
            BalanceMode::Representative(p.b.values()),
        )
        .unwrap();
    }
    let k = objs.len() as f64;
    DeskResult {
        bcacr: bc / k,
        distance: dist / k,
    }
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut samples = Vec::new();
    for c in [Category::Mug, Category::Pot, Category::Pan, Category::Tool] {
        for seed in [100u64, 101] {
            let o = gen_object(c, seed, DESK_POINTS).unwrap();
            samples.push(ObjectSample {
                id: format!("{c}-{seed}"),
                cloud: o.cloud,
                labels: o.labels,
                saliency: o.s_o,
            });
        }
    }
    let cfg = desk_config();
    let objs = train::prepare(samples, cfg.n_cand, 0).unwrap();

    let full = desk_run(&objs, &cfg);
    let mut no_balance = cfg.clone();
    no_balance.loss.w3 = 0.0;
    let no_balance = desk_run(&objs, &no_balance);
    let no_iteration = TrainConfig { m_max: 0, ..cfg.clone() };
    let no_iteration = desk_run(&objs, &no_iteration);

    let target = full.bcacr >= 70.0;
    let ordering = no_balance.composite() < full.composite() && no_iteration.composite() < full.composite();
    let show = |r: &DeskResult| format!("bcacr {:.1} dist {:.4} composite {:.3}", r.bcacr, r.distance, r.composite());
    outcome(
        target && ordering,
        format!(
            "full: {} | no L_p: {} | no iteration: {} | target >= 70 {target}, ablations strictly lower {ordering}, {}",
            show(&full),
            show(&no_balance),
            show(&no_iteration),
            secs(start.elapsed())
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Clustering

fn optimal_ss(rows: &[[f64; 4]], k: usize) -> f64 {
    let n = rows.len();
    let total = k.pow(n as u32);
    let mut assign = vec![0usize; n];
    let mut best = f64::INFINITY;
    for code in 0..total {
        let mut c = code;
        let mut used = [false; 3];
        for a in assign.iter_mut() {
            *a = c % k;
            used[*a] = true;
            c /= k;
        }
        if used.iter().take(k).all(|&u| u) {
            best = best.min(pipeline::within_cluster_ss(rows, &assign, k));
        }
    }
    best
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut within, mut trials, mut worst) = (0, 0, 0.0f64);
    for t in 0..24 {
        let n = 6 + t % 7;
        let rows: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let blob = rng.gen_range(0..3) as f64;
                [
                    blob * 0.3 + rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen::<f64>(),
                ]
            })
            .collect();
        let opt = optimal_ss(&rows, 3);
        let (assign, _) = pipeline::kmeans(&rows, 3, t as u64).unwrap();
        let got = pipeline::within_cluster_ss(&rows, &assign, 3);
        let ratio = if opt > 0.0 { got / opt } else { 1.0 };
        worst = worst.max(ratio);
        within += (ratio <= 1.05) as usize;
        trials += 1;
    }

    let o = gen_object(Category::Pot, 9, 400).unwrap();
    let a = pipeline::cluster_contacts(&o.cloud, &o.s_o, &o.labels, 17).unwrap();
    let b = pipeline::cluster_contacts(&o.cloud, &o.s_o, &o.labels, 17).unwrap();
    let deterministic = a == b;
    let disjoint = a.left.iter().all(|i| !a.right.contains(i));
    outcome(
        within == trials && deterministic && disjoint,
        format!("{within}/{trials} instances within 5% of exhaustive optimum (worst ratio {worst:.4}), seeded rerun identical {deterministic}, sides disjoint {disjoint}"),
    )
}

// ---------------------------------------------------------------------------
// 10. Format round-trips

const FIXTURE: &str = "ply
format ascii 1.0
comment three-vertex fixture
element vertex 3
property float x
property float y
property float z
property float saliency
property uchar label
end_header
0 0 0 0.25 0
1 0 0 0.5 1
0 1 -0.5 1 2
";

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let n = 500;
    let f32v = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| rng.gen_range(lo..hi) as f64;
    let pts: Vec<Point3> = (0..n)
        .map(|_| [f32v(&mut rng, -1.0, 1.0), f32v(&mut rng, -1.0, 1.0), f32v(&mut rng, -1.0, 1.0)])
        .collect();
    let sal: Vec<f64> = (0..n).map(|_| f32v(&mut rng, 0.0, 1.0)).collect();
    let raw: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let data = PlyData {
        cloud: PointCloud::new(pts).unwrap(),
        saliency: Some(SaliencyMap::new(sal.clone()).unwrap()),
        labels: Some(ContactLabels::from_u8(&raw).unwrap()),
        colors: Some(sal.iter().map(|&s| bisal_core::data::ply::colormap(s)).collect()),
    };
    let mut ply_ok = true;
    for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
        let mut buf = Vec::new();
        write_ply(&mut buf, &data, enc).unwrap();
        ply_ok &= read_ply(buf.as_slice()).unwrap() == data;
    }

    let records = vec![
        AnnotationRecord::new("mug-0", data.labels.as_ref().unwrap(), data.saliency.as_ref(), "a01"),
        AnnotationRecord::new("mug-1", data.labels.as_ref().unwrap(), None, "a02"),
    ];
    let ann_ok = parse_annotations(&annotations_to_string(&records).unwrap()).unwrap() == records;

    let fx = read_ply(FIXTURE.as_bytes()).unwrap();
    let fixture_ok = fx.cloud.points() == [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, -0.5]]
        && fx.saliency.as_ref().map(|s| s.values().to_vec()) == Some(vec![0.25, 0.5, 1.0])
        && fx.labels.as_ref().map(|l| l.to_u8()) == Some(vec![0, 1, 2])
        && fx.colors.is_none();
    outcome(
        ply_ok && ann_ok && fixture_ok,
        format!("PLY ascii+binary exact {ply_ok}, annotations exact {ann_ok}, 3-vertex fixture {fixture_ok}"),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "perfect-fit zeros", criterion_2),
        (3, "iteration schedule", criterion_3),
        (4, "stop rule", criterion_4),
        (5, "overfit sanity", criterion_5),
        (6, "refinement efficacy", criterion_6),
        (7, "metric oracles", criterion_7),
        (8, "desk-scale BCACR and ablations", criterion_8),
        (9, "clustering optimality", criterion_9),
        (10, "format round-trips", criterion_10),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        println!("criterion {id:>2} {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var("BISAL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
        return;
    }
    println!("acceptance: all criteria passed");
}
