//! Point clouds, per-point labels and saliency, and the handful of geometric
//! primitives the rest of the crate is built on.
//!
//! Clouds live in a canonical object frame: centered at the centroid, scaled
//! so the bounding-box diagonal is 1, with gravity pointing along -z.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn midpoint(a: Point3, b: Point3) -> Point3 {
    scale(add(a, b), 0.5)
}

/// An object-surface point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

/// The similarity transform applied when a cloud is brought into the
/// canonical frame: `canonical = (raw - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl PointCloud {
    /// Wraps points as-is. Requires at least three finite points.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "a point cloud needs at least 3 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(PointCloud { points })
    }

    /// Ingests raw points into the canonical frame (centroid at the origin,
    /// bounding-box diagonal 1).
    pub fn normalized(points: Vec<Point3>) -> Result<(Self, Normalization)> {
        let mut cloud = PointCloud::new(points)?;
        let center = centroid(&cloud.points)?;
        let diag = cloud.bbox_diagonal();
        if diag <= 0.0 {
            return Err(Error::Degenerate("all points coincide".into()));
        }
        let s = 1.0 / diag;
        for p in &mut cloud.points {
            *p = scale(sub(*p, center), s);
        }
        Ok((cloud, Normalization { center, scale: s }))
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points).expect("cloud is never empty")
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        dist(hi, lo)
    }

    /// Row-major `N x 3` copy of the coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// The cloud with point `i` moved to position `perm[i]`'s slot, i.e.
    /// `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        PointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Gravity line through this cloud's geometric center.
    pub fn gravity(&self) -> GravityLine {
        GravityLine::downward_through(self.centroid())
    }
}

/// Per-point contact class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    None = 0,
    Right = 1,
    Left = 2,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::None => "none",
            Label::Right => "right-hand",
            Label::Left => "left-hand",
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::None),
            1 => Ok(Label::Right),
            2 => Ok(Label::Left),
            other => Err(Error::InvalidArgument(format!(
                "contact label must be 0, 1 or 2, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContactLabels(Vec<Label>);

impl ContactLabels {
    pub fn new(labels: Vec<Label>) -> Self {
        ContactLabels(labels)
    }

    pub fn from_u8(raw: &[u8]) -> Result<Self> {
        raw.iter()
            .map(|&v| Label::try_from(v))
            .collect::<Result<Vec<_>>>()
            .map(ContactLabels)
    }

    pub fn none(n: usize) -> Self {
        ContactLabels(vec![Label::None; n])
    }

    pub fn as_slice(&self) -> &[Label] {
        &self.0
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.0.iter().map(|&l| l as u8).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Label {
        self.0[i]
    }

    pub fn indices(&self, label: Label) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices labeled with either hand.
    pub fn contact_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != Label::None)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.0.iter().filter(|&&l| l == label).count()
    }

    /// Training annotations need at least one point for each hand.
    pub fn require_bimanual(&self) -> Result<()> {
        if self.count(Label::Right) == 0 {
            return Err(Error::EmptySide(Label::Right.name()));
        }
        if self.count(Label::Left) == 0 {
            return Err(Error::EmptySide(Label::Left.name()));
        }
        Ok(())
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        ContactLabels(perm.iter().map(|&i| self.0[i]).collect())
    }
}

/// Per-point saliency in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap(Vec<f64>);

impl SaliencyMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("saliency value {v}")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "saliency value {v} outside [0, 1]"
            )));
        }
        Ok(SaliencyMap(values))
    }

    /// Clamps every value into `[0, 1]`. NaN is rejected.
    pub fn clamped(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("saliency".into()));
        }
        Ok(SaliencyMap(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
    }

    pub fn constant(n: usize, value: f64) -> Self {
        SaliencyMap(vec![value.clamp(0.0, 1.0); n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        SaliencyMap(perm.iter().map(|&i| self.0[i]).collect())
    }

    /// Mean value over the given indices (0 for an empty set).
    pub fn mean_over(&self, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().map(|&i| self.0[i]).sum::<f64>() / idx.len() as f64
    }
}

/// The vertical line through the center of mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityLine {
    origin: Point3,
    direction: Point3,
}

impl GravityLine {
    pub fn new(origin: Point3, direction: Point3) -> Result<Self> {
        let n = norm(direction);
        if !(n.is_finite() && n > 0.0) || origin.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("gravity line needs a finite origin and nonzero direction".into()));
        }
        Ok(GravityLine {
            origin,
            direction: scale(direction, 1.0 / n),
        })
    }

    /// Gravity along the canonical -z axis.
    pub fn downward_through(origin: Point3) -> Self {
        GravityLine {
            origin,
            direction: [0.0, 0.0, -1.0],
        }
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn direction(&self) -> Point3 {
        self.direction
    }
}

/// Arithmetic mean of the points.
pub fn centroid(points: &[Point3]) -> Result<Point3> {
    if points.is_empty() {
        return Err(Error::Empty("centroid of an empty point set"));
    }
    let mut acc = [0.0; 3];
    for p in points {
        acc = add(acc, *p);
    }
    Ok(scale(acc, 1.0 / points.len() as f64))
}

/// Euclidean distance from `p` to the line.
pub fn point_line_distance(p: Point3, line: &GravityLine) -> f64 {
    let rel = sub(p, line.origin);
    let along = dot(rel, line.direction);
    norm(sub(rel, scale(line.direction, along)))
}

/// The `k` nearest points to `query`, ascending by distance, ties broken by
/// the lower index.
pub fn knn(points: &[Point3], query: Point3, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            points.len()
        )));
    }
    // Squared distances keep the ordering and are exact for ties.
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = sub(*p, query);
            (dot(d, d), i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    Ok(all.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect())
}

/// Inverse-distance weights `1 / (d + eps)` of the `k` nearest points,
/// normalized to sum to one. Returns `(index, weight, distance)`.
pub fn interpolation_weights(
    points: &[Point3],
    query: Point3,
    k: usize,
    eps: f64,
) -> Result<Vec<(usize, f64, f64)>> {
    let nn = knn(points, query, k.min(points.len()))?;
    let raw: Vec<f64> = nn.iter().map(|&(_, d)| 1.0 / (d + eps)).collect();
    let total: f64 = raw.iter().sum();
    Ok(nn
        .iter()
        .zip(raw)
        .map(|(&(i, d), w)| (i, w / total, d))
        .collect())
}

/// Inverse-distance-weighted mean of `field` over the `k` nearest points.
pub fn soft_interpolate(
    points: &[Point3],
    field: &[f64],
    query: Point3,
    k: usize,
    eps: f64,
) -> Result<f64> {
    check_len("interpolated field", points.len(), field.len())?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let w = interpolation_weights(points, query, k, eps)?;
    // Offsets from the first neighbor keep constant fields exact.
    let f0 = field[w[0].0];
    Ok(f0 + w.into_iter().map(|(i, w, _)| w * (field[i] - f0)).sum::<f64>())
}

/// A triangulated surface whose triangles carry a region tag.
#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub triangles: Vec<[Point3; 3]>,
    pub tags: Vec<u32>,
}

impl TriangleMesh {
    pub fn push(&mut self, tri: [Point3; 3], tag: u32) {
        self.triangles.push(tri);
        self.tags.push(tag);
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(triangle_area).sum()
    }

    pub fn area_of_tag(&self, tag: u32) -> f64 {
        self.triangles
            .iter()
            .zip(&self.tags)
            .filter(|(_, &t)| t == tag)
            .map(|(tri, _)| triangle_area(tri))
            .sum()
    }
}

pub fn triangle_area(t: &[Point3; 3]) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

/// Anything that can be tessellated for area sampling.
pub trait Surface {
    fn tessellate(&self) -> TriangleMesh;
}

impl Surface for TriangleMesh {
    fn tessellate(&self) -> TriangleMesh {
        self.clone()
    }
}

/// Area-uniform sample of a surface: points plus the tag of the triangle
/// each point came from.
#[derive(Clone, Debug)]
pub struct SurfaceSample {
    pub points: Vec<Point3>,
    pub tags: Vec<u32>,
}

/// Draws `n` points uniformly by area, deterministically for a given seed.
/// Points are in the surface's own frame (not normalized).
pub fn sample_surface<S: Surface + ?Sized>(surface: &S, n: usize, seed: u64) -> Result<SurfaceSample> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 samples, got {n}")));
    }
    let mesh = surface.tessellate();
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate("surface has zero area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        let ti = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangles[ti];
        // Uniform barycentric sample via the square-root trick.
        let r1: f64 = rng.gen::<f64>().sqrt();
        let r2: f64 = rng.gen();
        let u = 1.0 - r1;
        let v = r1 * (1.0 - r2);
        let w = r1 * r2;
        points.push([
            u * a[0] + v * b[0] + w * c[0],
            u * a[1] + v * b[1] + w * c[1],
            u * a[2] + v * b[2] + w * c[2],
        ]);
        tags.push(mesh.tags[ti]);
    }
    Ok(SurfaceSample { points, tags })
}
