//! Synthetic objects, procedural saliency, ground-truth vectors and file I/O.

pub mod annotations;
pub mod dataset;
pub mod ply;
pub mod shapes;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{self, ContactLabels, Label, Point3, PointCloud, SaliencyMap};
use shapes::{Assembly, Patch};

pub use annotations::{load_annotations, save_annotations, AnnotationRecord};
pub use dataset::{make_dataset, DatasetConfig, DatasetSplit, Manifest, ManifestEntry, ObjectSample};
pub use ply::{load_ply, save_ply, PlyData, PlyEncoding};

pub const DEFAULT_POINTS: usize = 5000;
pub const DEFAULT_CANDIDATES: usize = 1000;

/// Width of the procedural saliency bump, in canonical units.
pub const SALIENCY_SIGMA: f64 = 0.15;
/// Radius of a labeled contact region, in canonical units.
pub const LABEL_RADIUS: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Mug,
    Pot,
    Pan,
    Kettle,
    Vase,
    KitchenPot,
    Tool,
    Cad,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Mug,
        Category::Pot,
        Category::Pan,
        Category::Kettle,
        Category::Vase,
        Category::KitchenPot,
        Category::Tool,
        Category::Cad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Mug => "mug",
            Category::Pot => "pot",
            Category::Pan => "pan",
            Category::Kettle => "kettle",
            Category::Vase => "vase",
            Category::KitchenPot => "kitchen-pot",
            Category::Tool => "tool",
            Category::Cad => "cad",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category {s:?}")))
    }
}

/// Tags attached to the patches of a generated object.
pub mod tag {
    pub const BODY: u32 = 0;
    pub const HANDLE: u32 = 1;
    pub const AUX: u32 = 2;
}

/// A procedurally shaped object. Dimensions are drawn from per-category
/// ranges using the seed; z points up.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricObject {
    pub category: Category,
    pub seed: u64,
    pub params: BTreeMap<&'static str, f64>,
    pub surface: Assembly,
    /// Where the functional (right) hand grasps, in the object frame.
    pub right_anchor: Point3,
    /// Where the supporting (left) hand grasps.
    pub left_anchor: Point3,
}

impl ParametricObject {
    pub fn new(category: Category, seed: u64) -> ParametricObject {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut draw = |name: &'static str, lo: f64, hi: f64| {
            let v = rng.gen_range(lo..hi);
            params.insert(name, v);
            v
        };
        let mut s = Assembly::default();
        let xz = |c: Point3, major: f64, minor: f64, start: f64, end: f64| Patch::Torus {
            center: c,
            u: [1.0, 0.0, 0.0],
            w: [0.0, 0.0, 1.0],
            major,
            minor,
            start,
            end,
        };
        let (right, left) = match category {
            Category::Mug => {
                let r = draw("radius", 0.35, 0.45);
                let h = draw("height", 0.8, 1.0);
                let hr = draw("handle_radius", 0.18, 0.26);
                s.add(Patch::revolution([0.0; 3], vec![[0.0, 0.0], [r, 0.0], [r, h]]), tag::BODY);
                s.add(xz([r, 0.0, 0.5 * h], hr, 0.04, -PI / 2.0, PI / 2.0), tag::HANDLE);
                ([r + hr, 0.0, 0.5 * h], [-r, 0.0, 0.5 * h])
            }
            Category::Pot => {
                let r = draw("radius", 0.5, 0.6);
                let h = draw("height", 0.5, 0.7);
                let hr = draw("handle_radius", 0.08, 0.12);
                s.add(Patch::revolution([0.0; 3], vec![[0.0, 0.0], [r, 0.0], [r, h], [1.05 * r, h]]), tag::BODY);
                let z = 0.8 * h;
                s.add(xz([r, 0.0, z], hr, 0.03, -PI / 2.0, PI / 2.0), tag::HANDLE);
                s.add(xz([-r, 0.0, z], hr, 0.03, PI / 2.0, 1.5 * PI), tag::AUX);
                ([r + hr, 0.0, z], [-r - hr, 0.0, z])
            }
            Category::Pan => {
                let r = draw("radius", 0.5, 0.6);
                let h = draw("height", 0.12, 0.18);
                let len = draw("handle_length", 0.7, 0.9);
                s.add(Patch::revolution([0.0; 3], vec![[0.0, 0.0], [r, 0.0], [1.1 * r, h]]), tag::BODY);
                let a = [1.05 * r, 0.0, 0.8 * h];
                let b = [r + len, 0.0, 1.2 * h + 0.1];
                s.add(Patch::Tube { a, b, radius: 0.035 }, tag::HANDLE);
                (geom::add(a, geom::scale(geom::sub(b, a), 0.7)), [-1.1 * r, 0.0, h])
            }
            Category::Kettle => {
                let r = draw("radius", 0.35, 0.45);
                let h = draw("height", 0.6, 0.8);
                let profile = vec![
                    [0.0, 0.0],
                    [r, 0.0],
                    [1.1 * r, 0.4 * h],
                    [0.8 * r, 0.9 * h],
                    [0.3 * r, h],
                    [0.0, h],
                ];
                s.add(Patch::revolution([0.0; 3], profile), tag::BODY);
                let hr = 0.6 * r;
                s.add(xz([0.0, 0.0, h], hr, 0.04, 0.0, PI), tag::HANDLE);
                s.add(
                    Patch::Tube {
                        a: [0.95 * r, 0.0, 0.4 * h],
                        b: [1.6 * r, 0.0, 0.85 * h],
                        radius: 0.05,
                    },
                    tag::AUX,
                );
                ([0.0, 0.0, h + hr], [-1.1 * r, 0.0, 0.4 * h])
            }
            Category::Vase => {
                let r = draw("radius", 0.25, 0.35);
                let h = draw("height", 0.9, 1.2);
                let profile = vec![
                    [0.0, 0.0],
                    [r, 0.0],
                    [1.2 * r, 0.35 * h],
                    [0.5 * r, 0.75 * h],
                    [0.45 * r, 0.9 * h],
                    [0.6 * r, h],
                ];
                s.add(Patch::revolution([0.0; 3], profile), tag::BODY);
                ([0.48 * r, 0.0, 0.82 * h], [-1.2 * r, 0.0, 0.3 * h])
            }
            Category::KitchenPot => {
                let r = draw("radius", 0.4, 0.5);
                let h = draw("height", 0.4, 0.55);
                let len = draw("handle_length", 0.5, 0.7);
                s.add(Patch::revolution([0.0; 3], vec![[0.0, 0.0], [r, 0.0], [r, h]]), tag::BODY);
                let a = [r, 0.0, 0.85 * h];
                let b = [r + len, 0.0, 0.95 * h];
                s.add(Patch::Tube { a, b, radius: 0.035 }, tag::HANDLE);
                s.add(xz([-r, 0.0, 0.85 * h], 0.07, 0.025, PI / 2.0, 1.5 * PI), tag::AUX);
                (geom::add(a, geom::scale(geom::sub(b, a), 0.6)), [-r - 0.07, 0.0, 0.85 * h])
            }
            Category::Tool => {
                let len = draw("handle_length", 0.9, 1.2);
                let head = draw("head_height", 0.3, 0.45);
                s.add(
                    Patch::Cuboid {
                        center: [0.0; 3],
                        half: [0.5 * len, 0.04, 0.05],
                    },
                    tag::HANDLE,
                );
                s.add(
                    Patch::Cuboid {
                        center: [0.5 * len, 0.0, 0.05],
                        half: [0.06, 0.08, 0.5 * head],
                    },
                    tag::BODY,
                );
                ([-0.35 * len, 0.0, 0.0], [0.3 * len, 0.0, 0.0])
            }
            Category::Cad => {
                let w = draw("width", 0.8, 1.1);
                let boss = draw("boss_height", 0.3, 0.5);
                s.add(
                    Patch::Cuboid {
                        center: [0.0; 3],
                        half: [0.5 * w, 0.3, 0.05],
                    },
                    tag::BODY,
                );
                s.add(
                    Patch::Tube {
                        a: [0.25 * w, 0.0, 0.05],
                        b: [0.25 * w, 0.0, 0.05 + boss],
                        radius: 0.1,
                    },
                    tag::AUX,
                );
                s.add(
                    Patch::Cuboid {
                        center: [-0.3 * w, 0.0, 0.2],
                        half: [0.1, 0.25, 0.15],
                    },
                    tag::HANDLE,
                );
                ([-0.3 * w, 0.0, 0.35], [0.45 * w, 0.0, 0.05])
            }
        };
        ParametricObject {
            category,
            seed,
            params,
            surface: s,
            right_anchor: right,
            left_anchor: left,
        }
    }
}

/// Output of [`gen_object`]. Everything is in the canonical frame.
#[derive(Clone, Debug)]
pub struct GeneratedObject {
    pub object: ParametricObject,
    pub cloud: PointCloud,
    pub labels: ContactLabels,
    /// Procedural single-handed saliency.
    pub s_o: SaliencyMap,
}

fn sampling_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xB15A
}

/// Indices of points within `radius` of `anchor`, or the nearest `min_count`
/// if fewer fall inside.
fn region(points: &[Point3], anchor: Point3, radius: f64, min_count: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (geom::dist(*p, anchor), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let inside = d.iter().take_while(|(dist, _)| *dist <= radius).count();
    d.truncate(inside.max(min_count).min(points.len()));
    d.into_iter().map(|(_, i)| i).collect()
}

/// Samples an object of the given category with `n` surface points, labels
/// the two grasp regions, and computes a procedural single-handed saliency
/// map peaking at the right-hand region.
pub fn gen_object(category: Category, seed: u64, n: usize) -> Result<GeneratedObject> {
    let object = ParametricObject::new(category, seed);
    let sample = geom::sample_surface(&object.surface, n, sampling_seed(seed))?;
    let (cloud, norm) = PointCloud::normalized(sample.points)?;
    let to_canonical = |p: Point3| geom::scale(geom::sub(p, norm.center), norm.scale);
    let right_anchor = to_canonical(object.right_anchor);
    let left_anchor = to_canonical(object.left_anchor);

    let min_count = (n / 100).max(2);
    let mut labels = vec![Label::None; n];
    for i in region(cloud.points(), right_anchor, LABEL_RADIUS, min_count) {
        labels[i] = Label::Right;
    }
    for i in region(cloud.points(), left_anchor, LABEL_RADIUS, min_count) {
        if labels[i] == Label::None {
            labels[i] = Label::Left;
        }
    }
    let labels = ContactLabels::new(labels);
    labels.require_bimanual()?;

    let s = cloud
        .points()
        .iter()
        .map(|p| {
            let d2 = geom::dist(*p, right_anchor).powi(2);
            (-d2 / (2.0 * SALIENCY_SIGMA * SALIENCY_SIGMA)).exp()
        })
        .collect();
    Ok(GeneratedObject {
        object,
        cloud,
        labels,
        s_o: SaliencyMap::new(s)?,
    })
}

/// Candidate displacement vectors from each labeled point to points carrying
/// the opposite label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorGT {
    candidates: Vec<Vec<Point3>>,
}

impl VectorGT {
    pub fn from_candidates(candidates: Vec<Vec<Point3>>) -> Self {
        VectorGT { candidates }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self, i: usize) -> &[Point3] {
        &self.candidates[i]
    }
}

/// For every labeled point, up to `n_cand` vectors `y - x` to distinct
/// opposite-label points `y`, drawn without replacement.
pub fn build_vector_gt(cloud: &PointCloud, labels: &ContactLabels, n_cand: usize, seed: u64) -> Result<VectorGT> {
    check_len("labels", cloud.len(), labels.len())?;
    labels.require_bimanual()?;
    let right = labels.indices(Label::Right);
    let left = labels.indices(Label::Left);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = cloud.points();
    let candidates = (0..cloud.len())
        .map(|i| {
            let opposite = match labels.get(i) {
                Label::None => return Vec::new(),
                Label::Right => &left,
                Label::Left => &right,
            };
            let chosen: Vec<usize> = if opposite.len() <= n_cand {
                opposite.clone()
            } else {
                index::sample(&mut rng, opposite.len(), n_cand).into_iter().map(|k| opposite[k]).collect()
            };
            chosen.into_iter().map(|j| geom::sub(pts[j], pts[i])).collect()
        })
        .collect();
    Ok(VectorGT { candidates })
}

/// A set of annotation variants for the robustness study: three disturbed
/// copies for every accurate one. In a disturbed copy, `fraction` of the
/// labeled points lose their label and the same number of random unlabeled
/// points receive it.
pub fn disturbed_annotations(labels: &ContactLabels, count: usize, fraction: f64, seed: u64) -> Result<Vec<(ContactLabels, bool)>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("disturbance fraction {fraction} outside [0, 1]")));
    }
    labels.require_bimanual()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        // Positions 0..2 of every group of four are disturbed.
        if k % 4 == 3 {
            out.push((labels.clone(), false));
            continue;
        }
        let mut raw = labels.as_slice().to_vec();
        for side in [Label::Right, Label::Left] {
            let on = labels.indices(side);
            let off: Vec<usize> = (0..raw.len()).filter(|&i| raw[i] == Label::None).collect();
            // Keep at least one point per side so the record stays bimanual.
            let moved = ((on.len() as f64 * fraction).round() as usize).min(on.len() - 1).min(off.len());
            for i in index::sample(&mut rng, on.len(), moved) {
                raw[on[i]] = Label::None;
            }
            for i in index::sample(&mut rng, off.len(), moved) {
                raw[off[i]] = side;
            }
        }
        out.push((ContactLabels::new(raw), true));
    }
    Ok(out)
}
