use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use bisal_core::data::dataset::{self, load_manifest};
use bisal_core::data::ply::{self, PlyData, PlyEncoding};
use bisal_core::data::Category;
use bisal_core::geom::{ContactLabels, Label, PointCloud, SaliencyMap};
use bisal_core::nets::{self, ModelWeights, NetConfig};
use bisal_core::pipeline::{self, EvalConfig, ObjectReport};
use bisal_core::train::{self, OptimizerKind};
use log::info;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::{EvalArgs, ExportArgs, GenDataArgs, InferArgs, ObjectArgs, RefineArgs, RefineOverrides, TrainArgs};

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

fn finish(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    cfg.echo(out).with_context(|| format!("writing config to {}", out.display()))?;
    info!("resolved configuration:\n{}", cfg.to_toml());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    if let Some(names) = a.categories {
        cfg.data.categories = names
            .iter()
            .map(|n| n.trim().parse::<Category>())
            .collect::<Result<_, _>>()
            .map_err(|e| ConfigError(e.to_string()))?;
    }
    set!(cfg.data.train_per_category, a.train_per_category);
    set!(cfg.data.test_per_category, a.test_per_category);
    set!(cfg.data.num_points, a.num_points);
    set!(cfg.data.seed, a.seed);
    finish(&cfg, &a.out)?;
    let split = dataset::make_dataset(&cfg.data, &a.out)?;
    println!(
        "wrote {} training and {} test objects to {}",
        split.train.entries.len(),
        split.test.entries.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if a.compact {
        cfg.net = NetConfig::compact();
    }
    let t = &mut cfg.train;
    set!(t.cm_epochs, a.cm_epochs);
    set!(t.epochs, a.epochs);
    set!(t.lr, a.lr);
    if let Some(o) = a.optimizer {
        t.optimizer = match o.as_str() {
            "adaptive-moment" => OptimizerKind::AdaptiveMoment,
            "plain-gradient" => OptimizerKind::PlainGradient,
            _ => return Err(ConfigError(format!("unknown optimizer {o:?}")).into()),
        };
    }
    set!(t.k, a.k);
    set!(t.m, a.m);
    set!(t.m_max, a.m_max);
    set!(t.sigma_s, a.sigma_s);
    set!(t.sigma_p, a.sigma_p);
    set!(t.n_cand, a.n_cand);
    set!(t.checkpoint_every, a.checkpoint_every);
    set!(t.loss.lambda1, a.lambda1);
    set!(t.loss.lambda2, a.lambda2);
    set!(t.loss.w1, a.w1);
    set!(t.loss.w2, a.w2);
    set!(t.loss.w3, a.w3);
    set!(t.loss.w4, a.w4);
    set!(t.loss.softsel_temp, a.temp);
    set!(t.temp_halving_epochs, a.temp_halving_epochs);
    set!(t.seed, a.seed);
    finish(&cfg, &a.out)?;

    let samples = dataset::load_split(&a.data)?;
    info!("loaded {} training objects", samples.len());
    let objects = train::prepare(samples, cfg.train.n_cand, cfg.train.seed)?;
    let mut weights = ModelWeights::init(&cfg.net, cfg.train.seed)?;
    let ckpt_dir = a.out.join("checkpoints");
    let ckpt = (cfg.train.checkpoint_every > 0).then_some(ckpt_dir.as_path());
    if let Some(d) = ckpt {
        fs::create_dir_all(d)?;
    }

    let cm_trace = train::train_cm(&objects, &cfg.train, &mut weights, ckpt)?;
    train::write_jsonl(&a.out.join("cm_trace.jsonl"), &cm_trace)?;
    let s = train::corrected_maps(&objects, &weights)?;
    let report = train::train_joint(&objects, s, &cfg.train, &mut weights, ckpt)?;
    train::write_jsonl(&a.out.join("joint_trace.jsonl"), &report.trace)?;
    weights.save(&a.out.join("weights.bgsw"))?;

    let last = report.trace.last().map(|r| r.loss);
    println!(
        "trained on {} objects: updates at {:?}, stop {:?}, final loss {}",
        objects.len(),
        report.update_epochs(),
        report.stop_epoch(),
        last.map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

struct Object {
    cloud: PointCloud,
    s_o: SaliencyMap,
}

fn load_object(a: &ObjectArgs) -> Result<Object> {
    let data = ply::load_ply(&a.input)?;
    let s_o = match &a.saliency {
        Some(p) => {
            let values: Vec<f64> = serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?;
            if values.len() != data.cloud.len() {
                return Err(bisal_core::Error::LengthMismatch {
                    what: "saliency file",
                    expected: data.cloud.len(),
                    got: values.len(),
                }
                .into());
            }
            SaliencyMap::new(values)?
        }
        None => data.saliency.ok_or_else(|| {
            bisal_core::Error::Format {
                format: "PLY",
                msg: format!("{}: no saliency property and no --saliency file", a.input.display()),
            }
        })?,
    };
    Ok(Object { cloud: data.cloud, s_o })
}

fn save_prediction(path: &Path, cloud: &PointCloud, b: &SaliencyMap, labels: &ContactLabels) -> Result<()> {
    let data = PlyData {
        cloud: cloud.clone(),
        saliency: Some(b.clone()),
        labels: Some(labels.clone()),
        colors: Some(b.values().iter().map(|&v| ply::colormap(v)).collect()),
    };
    ply::save_ply(path, &data, PlyEncoding::BinaryLittleEndian)?;
    Ok(())
}

#[derive(Serialize)]
struct InferSummary {
    points: usize,
    tau: f64,
    right: Vec<usize>,
    left: Vec<usize>,
    max_saliency: f64,
}

pub fn infer(mut cfg: RunConfig, a: InferArgs) -> Result<()> {
    set!(cfg.eval.tau, a.tau);
    finish(&cfg, &a.object.out)?;
    let obj = load_object(&a.object)?;
    let weights = ModelWeights::load(&a.object.weights)?;
    let s = nets::cm_forward(&weights, &obj.cloud, &obj.s_o)?;
    let pred = pipeline::predict(&weights, &obj.cloud, &s)?;
    let masked = pipeline::mask_labels(&pred.b, &pred.labels, cfg.eval.tau)?;
    save_prediction(&a.object.out.join("prediction.ply"), &obj.cloud, &pred.b, &masked)?;
    let summary = InferSummary {
        points: obj.cloud.len(),
        tau: cfg.eval.tau,
        right: masked.indices(Label::Right),
        left: masked.indices(Label::Left),
        max_saliency: pred.b.values().iter().copied().fold(0.0, f64::max),
    };
    write_json(&a.object.out.join("infer.json"), &summary)?;
    println!("{} right and {} left contact points", summary.right.len(), summary.left.len());
    Ok(())
}

fn apply_refine(eval: &mut EvalConfig, r: RefineOverrides) {
    set!(eval.refine.w_r, r.w_r);
    set!(eval.refine.max_iters, r.max_iters);
    set!(eval.refine.lr, r.refine_lr);
    set!(eval.refine.temp, r.refine_temp);
    set!(eval.refine.mu, r.mu);
    set!(eval.seed, r.seed);
}

#[derive(Serialize)]
struct RefineSummary {
    iterations: usize,
    converged: bool,
    initial_distance: Option<f64>,
    final_distance: Option<f64>,
    right: Vec<usize>,
    left: Vec<usize>,
    contact_balance_distance: Option<f64>,
    warnings: Vec<String>,
}

pub fn refine(mut cfg: RunConfig, a: RefineArgs) -> Result<()> {
    apply_refine(&mut cfg.eval, a.refine);
    let out = &a.object.out;
    finish(&cfg, out)?;
    let obj = load_object(&a.object)?;
    let weights = ModelWeights::load(&a.object.weights)?;
    let s = nets::cm_forward(&weights, &obj.cloud, &obj.s_o)?;
    let inf = pipeline::infer_object(&weights, &obj.cloud, &s, &cfg.eval)?;
    let refined = inf.contacts.as_ref().map(|c| c.refined.clone()).unwrap_or_else(|| inf.prediction.b.clone());
    save_prediction(&out.join("refined.ply"), &obj.cloud, &refined, &inf.prediction.labels)?;
    if let Some(r) = &inf.refine {
        train::write_jsonl(&out.join("refine_trace.jsonl"), &r.trace)?;
    }
    let summary = RefineSummary {
        iterations: inf.refine.as_ref().map_or(0, |r| r.iterations),
        converged: inf.refine.as_ref().is_some_and(|r| r.converged),
        initial_distance: inf.refine.as_ref().map(|r| r.initial_distance),
        final_distance: inf.refine.as_ref().map(|r| r.final_distance),
        right: inf.contacts.as_ref().map(|c| c.right.clone()).unwrap_or_default(),
        left: inf.contacts.as_ref().map(|c| c.left.clone()).unwrap_or_default(),
        contact_balance_distance: inf.contacts.as_ref().map(|c| c.balance_distance),
        warnings: inf.warnings,
    };
    write_json(&out.join("refine.json"), &summary)?;
    match (summary.initial_distance, summary.final_distance) {
        (Some(d0), Some(d1)) => println!(
            "refinement: {} iterations, balance {d0:.4} -> {d1:.4}{}",
            summary.iterations,
            if summary.converged { "" } else { " (not converged)" }
        ),
        _ => println!("refinement: skipped"),
    }
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    objects: usize,
    tau_c: f64,
    mean_bcacr: f64,
    mean_bcacr_refined: f64,
    mean_balance_pre: Option<f64>,
    mean_balance_post: Option<f64>,
    mean_grasp_coverage: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    set!(cfg.eval.tau_c, a.tau_c);
    set!(cfg.eval.tau, a.tau);
    apply_refine(&mut cfg.eval, a.refine);
    finish(&cfg, &a.out)?;
    let weights = ModelWeights::load(&a.weights)?;
    let manifest = load_manifest(&a.data)?;
    let dir = a.data.parent().unwrap_or(Path::new("."));
    let mut reports: Vec<ObjectReport> = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let o = dataset::load_sample(&dir.join(&e.file), &e.object_id)?;
        let s = nets::cm_forward(&weights, &o.cloud, &o.saliency)?;
        reports.push(pipeline::evaluate_object(&weights, &o.id, &o.cloud, &s, &o.labels, &cfg.eval)?);
    }
    reports.sort_by(|x, y| x.object_id.cmp(&y.object_id));
    train::write_jsonl(&a.out.join("report.jsonl"), &reports)?;
    let summary = EvalSummary {
        objects: reports.len(),
        tau_c: cfg.eval.tau_c,
        mean_bcacr: mean(reports.iter().map(|r| r.bcacr)).unwrap_or(f64::NAN),
        mean_bcacr_refined: mean(reports.iter().map(|r| r.bcacr_refined)).unwrap_or(f64::NAN),
        mean_balance_pre: mean(reports.iter().filter_map(|r| r.balance_pre)),
        mean_balance_post: mean(reports.iter().filter_map(|r| r.balance_post)),
        mean_grasp_coverage: mean(reports.iter().filter_map(|r| r.grasp_coverage)),
    };
    write_json(&a.out.join("summary.json"), &summary)?;

    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("{:<24} {:>8} {:>8} {:>9} {:>9} {:>6}", "object", "bcacr", "refined", "bal-pre", "bal-post", "iters");
    for r in &reports {
        println!(
            "{:<24} {:>8.2} {:>8.2} {:>9} {:>9} {:>6}",
            r.object_id,
            r.bcacr,
            r.bcacr_refined,
            opt(r.balance_pre),
            opt(r.balance_post),
            r.refine_iterations
        );
    }
    println!(
        "{:<24} {:>8.2} {:>8.2} {:>9} {:>9}",
        "mean",
        summary.mean_bcacr,
        summary.mean_bcacr_refined,
        opt(summary.mean_balance_pre),
        opt(summary.mean_balance_post)
    );
    Ok(())
}

pub fn export_ply(a: ExportArgs) -> Result<()> {
    let base = ply::load_ply(&a.input)?;
    let map = match &a.map {
        Some(p) => {
            let m = ply::load_ply(p)?;
            m.saliency.ok_or_else(|| bisal_core::Error::Format {
                format: "PLY",
                msg: format!("{}: no saliency property", p.display()),
            })?
        }
        None => base.saliency.clone().ok_or_else(|| bisal_core::Error::Format {
            format: "PLY",
            msg: format!("{}: no saliency property; pass --map", a.input.display()),
        })?,
    };
    if map.len() != base.cloud.len() {
        return Err(bisal_core::Error::LengthMismatch {
            what: "saliency map",
            expected: base.cloud.len(),
            got: map.len(),
        }
        .into());
    }
    let out = PlyData {
        colors: Some(map.values().iter().map(|&v| ply::colormap(v)).collect()),
        saliency: Some(map),
        labels: base.labels,
        cloud: base.cloud,
    };
    let enc = if a.ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian };
    ply::save_ply(&a.out, &out, enc)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
