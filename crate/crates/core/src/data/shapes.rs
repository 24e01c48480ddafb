//! Parametric surface patches, tessellated on a regular grid for sampling.

use std::f64::consts::PI;

use crate::geom::{self, Point3, Surface, TriangleMesh};

const RING_SEGMENTS: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub enum Patch {
    /// Surface of revolution about the vertical axis through `base`. The
    /// profile is a polyline of `(radius, height)` pairs.
    Revolution {
        base: Point3,
        profile: Vec<[f64; 2]>,
        segments: usize,
    },
    /// Section of a torus. The ring lies in the plane spanned by the unit
    /// vectors `u` and `w`, swept from angle `start` to `end`.
    Torus {
        center: Point3,
        u: Point3,
        w: Point3,
        major: f64,
        minor: f64,
        start: f64,
        end: f64,
    },
    /// Open cylinder from `a` to `b`.
    Tube { a: Point3, b: Point3, radius: f64 },
    /// Axis-aligned box.
    Cuboid { center: Point3, half: Point3 },
}

impl Patch {
    pub fn sphere(center: Point3, radius: f64) -> Patch {
        let rings = 24;
        let profile = (0..=rings)
            .map(|i| {
                let t = PI * i as f64 / rings as f64;
                [radius * t.sin(), -radius * t.cos()]
            })
            .collect();
        Patch::Revolution {
            base: center,
            profile,
            segments: RING_SEGMENTS,
        }
    }

    pub fn revolution(base: Point3, profile: Vec<[f64; 2]>) -> Patch {
        Patch::Revolution {
            base,
            profile,
            segments: RING_SEGMENTS,
        }
    }

    pub fn tessellate_tagged(&self, tag: u32) -> TriangleMesh {
        let mut mesh = TriangleMesh::default();
        self.tessellate_into(&mut mesh, tag);
        mesh
    }

    pub fn tessellate_into(&self, mesh: &mut TriangleMesh, tag: u32) {
        match self {
            Patch::Revolution {
                base,
                profile,
                segments,
            } => {
                let grid: Vec<Vec<Point3>> = profile
                    .iter()
                    .map(|&[r, z]| {
                        (0..=*segments)
                            .map(|j| {
                                let phi = 2.0 * PI * j as f64 / *segments as f64;
                                [base[0] + r * phi.cos(), base[1] + r * phi.sin(), base[2] + z]
                            })
                            .collect()
                    })
                    .collect();
                push_grid(mesh, &grid, tag);
            }
            Patch::Torus {
                center,
                u,
                w,
                major,
                minor,
                start,
                end,
            } => {
                let n = geom::cross(*u, *w);
                let steps = ((end - start).abs() / (2.0 * PI) * RING_SEGMENTS as f64).ceil().max(4.0) as usize;
                let tube = 16;
                let grid: Vec<Vec<Point3>> = (0..=steps)
                    .map(|i| {
                        let th = start + (end - start) * i as f64 / steps as f64;
                        let radial = geom::add(geom::scale(*u, th.cos()), geom::scale(*w, th.sin()));
                        let c = geom::add(*center, geom::scale(radial, *major));
                        (0..=tube)
                            .map(|j| {
                                let phi = 2.0 * PI * j as f64 / tube as f64;
                                let off = geom::add(geom::scale(radial, phi.cos()), geom::scale(n, phi.sin()));
                                geom::add(c, geom::scale(off, *minor))
                            })
                            .collect()
                    })
                    .collect();
                push_grid(mesh, &grid, tag);
            }
            Patch::Tube { a, b, radius } => {
                let d = geom::sub(*b, *a);
                let len = geom::norm(d);
                let d = geom::scale(d, 1.0 / len);
                let helper = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
                let e1 = geom::cross(d, helper);
                let e1 = geom::scale(e1, 1.0 / geom::norm(e1));
                let e2 = geom::cross(d, e1);
                let along = ((len / radius).ceil() as usize).clamp(2, 64);
                let around = 16;
                let grid: Vec<Vec<Point3>> = (0..=along)
                    .map(|i| {
                        let c = geom::add(*a, geom::scale(geom::sub(*b, *a), i as f64 / along as f64));
                        (0..=around)
                            .map(|j| {
                                let phi = 2.0 * PI * j as f64 / around as f64;
                                let off = geom::add(geom::scale(e1, phi.cos()), geom::scale(e2, phi.sin()));
                                geom::add(c, geom::scale(off, *radius))
                            })
                            .collect()
                    })
                    .collect();
                push_grid(mesh, &grid, tag);
            }
            Patch::Cuboid { center, half } => {
                let corner = |sx: f64, sy: f64, sz: f64| {
                    [center[0] + sx * half[0], center[1] + sy * half[1], center[2] + sz * half[2]]
                };
                let faces = [
                    [corner(-1., -1., -1.), corner(1., -1., -1.), corner(1., 1., -1.), corner(-1., 1., -1.)],
                    [corner(-1., -1., 1.), corner(1., -1., 1.), corner(1., 1., 1.), corner(-1., 1., 1.)],
                    [corner(-1., -1., -1.), corner(1., -1., -1.), corner(1., -1., 1.), corner(-1., -1., 1.)],
                    [corner(-1., 1., -1.), corner(1., 1., -1.), corner(1., 1., 1.), corner(-1., 1., 1.)],
                    [corner(-1., -1., -1.), corner(-1., 1., -1.), corner(-1., 1., 1.), corner(-1., -1., 1.)],
                    [corner(1., -1., -1.), corner(1., 1., -1.), corner(1., 1., 1.), corner(1., -1., 1.)],
                ];
                for [p, q, r, s] in faces {
                    mesh.push([p, q, r], tag);
                    mesh.push([p, r, s], tag);
                }
            }
        }
    }
}

fn push_grid(mesh: &mut TriangleMesh, grid: &[Vec<Point3>], tag: u32) {
    for rows in grid.windows(2) {
        let (a, b) = (&rows[0], &rows[1]);
        for j in 0..a.len() - 1 {
            mesh.push([a[j], b[j], b[j + 1]], tag);
            mesh.push([a[j], b[j + 1], a[j + 1]], tag);
        }
    }
}

/// A union of tagged patches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assembly {
    pub parts: Vec<(Patch, u32)>,
}

impl Assembly {
    pub fn add(&mut self, patch: Patch, tag: u32) {
        self.parts.push((patch, tag));
    }
}

impl Surface for Assembly {
    fn tessellate(&self) -> TriangleMesh {
        let mut mesh = TriangleMesh::default();
        for (p, tag) in &self.parts {
            p.tessellate_into(&mut mesh, *tag);
        }
        mesh
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_areas() {
        let sphere = Patch::sphere([0.0; 3], 1.0).tessellate_tagged(0).area();
        assert!((sphere - 4.0 * PI).abs() / (4.0 * PI) < 0.01, "{sphere}");

        let tube = Patch::Tube {
            a: [0.0; 3],
            b: [0.0, 0.0, 2.0],
            radius: 0.5,
        };
        let want = 2.0 * PI * 0.5 * 2.0;
        assert!((tube.tessellate_tagged(0).area() - want).abs() / want < 0.01);

        let torus = Patch::Torus {
            center: [0.0; 3],
            u: [1.0, 0.0, 0.0],
            w: [0.0, 1.0, 0.0],
            major: 1.0,
            minor: 0.2,
            start: 0.0,
            end: 2.0 * PI,
        };
        let want = 4.0 * PI * PI * 0.2;
        assert!((torus.tessellate_tagged(0).area() - want).abs() / want < 0.02);

        let cube = Patch::Cuboid {
            center: [1.0; 3],
            half: [0.5, 1.0, 1.5],
        };
        assert!((cube.tessellate_tagged(0).area() - 2.0 * (2.0 + 3.0 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn assembly_keeps_tags() {
        let mut a = Assembly::default();
        a.add(Patch::sphere([0.0; 3], 1.0), 0);
        a.add(
            Patch::Cuboid {
                center: [3.0, 0.0, 0.0],
                half: [0.5; 3],
            },
            7,
        );
        let m = a.tessellate();
        assert!((m.area_of_tag(7) - 6.0).abs() < 1e-12);
        assert_eq!(m.triangles.len(), m.tags.len());
    }
}
