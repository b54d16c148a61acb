//! Synthetic mesh classification dataset: per-class closed surfaces with
//! distinct proportions and bump patterns, per-pose near-isometric
//! deformations, and intrinsic descriptor signals. A stand-in for
//! registered human-body scan data, which cannot be redistributed.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::Signal;
use crate::mesh::TriMesh;
use crate::rng::subsystem_rng;

use super::intrinsic_descriptors;

/// One labeled mesh with its descriptor signal.
#[derive(Debug, Clone)]
pub struct MeshItem {
    pub mesh: TriMesh,
    pub signal: Signal,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct MeshDataset {
    pub items: Vec<MeshItem>,
    pub num_classes: usize,
}

/// A sphere triangulation with exactly `n` vertices: a UV sphere sized just
/// below `n`, then longest-edge bisection (midpoints reprojected) until the
/// count is exact. Bisection adds one vertex at a time and preserves the
/// closed manifold structure.
pub fn sphere_mesh(n: usize, radius: f64) -> Result<TriMesh> {
    if n < 6 {
        return Err(Error::InvalidArgument(format!(
            "sphere mesh needs at least 6 vertices, got {n}"
        )));
    }
    // Pick (rings, segments) with (rings-1)*segments + 2 <= n, maximizing
    // the vertex count and preferring square-ish aspect.
    let mut best: Option<(usize, usize, usize)> = None; // (count, rings, segments)
    let budget = n - 2;
    for rings_minus_1 in 2..=budget {
        let segments = budget / rings_minus_1;
        if segments < 3 {
            break;
        }
        let count = rings_minus_1 * segments;
        let aspect_gap = rings_minus_1.abs_diff(segments);
        let better = match best {
            None => true,
            Some((bc, br, bs)) => count > bc || (count == bc && aspect_gap < br.abs_diff(bs)),
        };
        if better {
            best = Some((count, rings_minus_1, segments));
        }
    }
    let (_, rings_minus_1, segments) =
        best.ok_or_else(|| Error::InvalidArgument(format!("no UV layout fits {n} vertices")))?;
    let rings = rings_minus_1 + 1;
    let mut vertices: Vec<[f64; 3]> = Vec::with_capacity(n);
    vertices.push([0.0, 0.0, radius]); // north pole
    for i in 1..rings {
        let phi = std::f64::consts::PI * i as f64 / rings as f64;
        for j in 0..segments {
            let theta = std::f64::consts::TAU * j as f64 / segments as f64;
            vertices.push([
                radius * phi.sin() * theta.cos(),
                radius * phi.sin() * theta.sin(),
                radius * phi.cos(),
            ]);
        }
    }
    vertices.push([0.0, 0.0, -radius]); // south pole
    let south = vertices.len() - 1;
    let ring_base = |i: usize| 1 + (i - 1) * segments;
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for j in 0..segments {
        let a = ring_base(1) + j;
        let b = ring_base(1) + (j + 1) % segments;
        faces.push([0, a, b]);
    }
    for i in 1..rings - 1 {
        for j in 0..segments {
            let a = ring_base(i) + j;
            let b = ring_base(i) + (j + 1) % segments;
            let c = ring_base(i + 1) + j;
            let d = ring_base(i + 1) + (j + 1) % segments;
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for j in 0..segments {
        let a = ring_base(rings - 1) + j;
        let b = ring_base(rings - 1) + (j + 1) % segments;
        faces.push([south, b, a]);
    }
    // Longest-edge bisection up to the exact count.
    while vertices.len() < n {
        let mut longest = (0usize, 0usize);
        let mut longest_len = -1.0;
        for f in &faces {
            for e in 0..3 {
                let (u, v) = (f[e].min(f[(e + 1) % 3]), f[e].max(f[(e + 1) % 3]));
                let len = crate::mesh::distance(vertices[u], vertices[v]);
                if len > longest_len || (len == longest_len && (u, v) < longest) {
                    longest_len = len;
                    longest = (u, v);
                }
            }
        }
        let (u, v) = longest;
        let mid = {
            let a = vertices[u];
            let b = vertices[v];
            let m = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
            let norm = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            [
                radius * m[0] / norm,
                radius * m[1] / norm,
                radius * m[2] / norm,
            ]
        };
        let mid_idx = vertices.len();
        vertices.push(mid);
        let mut new_faces = Vec::with_capacity(faces.len() + 2);
        for f in faces {
            let pos = (0..3).find(|&e| {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                (a.min(b), a.max(b)) == (u, v)
            });
            match pos {
                Some(e) => {
                    let a = f[e];
                    let b = f[(e + 1) % 3];
                    let w = f[(e + 2) % 3];
                    new_faces.push([a, mid_idx, w]);
                    new_faces.push([mid_idx, b, w]);
                }
                None => new_faces.push(f),
            }
        }
        faces = new_faces;
    }
    TriMesh::new(vertices, faces)
}

/// Class shape parameters: superquadric-like proportions plus a bump
/// pattern that differentiates the intrinsic geometry.
struct ClassShape {
    axes: [f64; 3],
    exponent: f64,
    bump_m: f64,
    bump_n: f64,
    bump_amp: f64,
}

impl ClassShape {
    fn sample(rng: &mut ChaCha20Rng) -> Self {
        ClassShape {
            axes: [
                rng.random_range(0.7..1.4),
                rng.random_range(0.7..1.4),
                rng.random_range(0.7..1.4),
            ],
            exponent: rng.random_range(1.6..3.4),
            bump_m: rng.random_range(2..=6) as f64,
            bump_n: rng.random_range(1..=4) as f64,
            bump_amp: rng.random_range(0.06..0.16),
        }
    }

    /// Radial profile in direction `(theta, phi)` (azimuth, elevation).
    fn radius(&self, theta: f64, phi: f64) -> f64 {
        let p = self.exponent;
        let x = (phi.cos() * theta.cos() / self.axes[0]).abs().powf(p);
        let y = (phi.cos() * theta.sin() / self.axes[1]).abs().powf(p);
        let z = (phi.sin() / self.axes[2]).abs().powf(p);
        let base = (x + y + z).powf(-1.0 / p);
        base * (1.0 + self.bump_amp * (self.bump_m * theta).cos() * (self.bump_n * 2.0 * phi).cos())
    }
}

fn rotate(p: [f64; 3], axis: usize, angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]],
        1 => [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]],
        _ => [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]],
    }
}

/// Generates the dataset: `num_classes` base shapes, `poses_per_class`
/// near-isometric deformations each (twist and bend plus a rigid rotation),
/// at one of the supported resolutions. Deterministic given the seed.
pub fn synth_mesh_dataset(
    num_classes: usize,
    poses_per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<MeshDataset> {
    if !matches!(resolution, 500 | 1000 | 2500) {
        return Err(Error::InvalidArgument(format!(
            "unsupported resolution {resolution} (expected 500, 1000, or 2500)"
        )));
    }
    if num_classes == 0 || poses_per_class == 0 {
        return Err(Error::InvalidArgument(
            "need at least one class and one pose".into(),
        ));
    }
    let template = sphere_mesh(resolution, 1.0)?;
    let mut rng = subsystem_rng(seed, "synth-mesh");
    let shapes: Vec<ClassShape> = (0..num_classes).map(|_| ClassShape::sample(&mut rng)).collect();
    let mut items = Vec::with_capacity(num_classes * poses_per_class);
    for (label, shape) in shapes.iter().enumerate() {
        for _ in 0..poses_per_class {
            let twist = rng.random_range(-0.3..0.3);
            let bend = rng.random_range(-0.15..0.15);
            let rot = [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ];
            let vertices: Vec<[f64; 3]> = template
                .vertices()
                .iter()
                .map(|&p| {
                    let theta = p[1].atan2(p[0]);
                    let phi = p[2].asin().clamp(
                        -std::f64::consts::FRAC_PI_2,
                        std::f64::consts::FRAC_PI_2,
                    );
                    let r = shape.radius(theta, phi);
                    let mut q = [r * p[0], r * p[1], r * p[2]];
                    // Twist around z proportional to height, then a gentle
                    // bend: both change the embedding much more than the
                    // intrinsic geometry.
                    q = rotate(q, 2, twist * q[2]);
                    q = rotate(q, 0, bend * q[2]);
                    q = rotate(q, 0, rot[0]);
                    q = rotate(q, 1, rot[1]);
                    q = rotate(q, 2, rot[2]);
                    q
                })
                .collect();
            let mesh = TriMesh::new(vertices, template.faces().to_vec())?;
            let signal = intrinsic_descriptors(&mesh)?;
            items.push(MeshItem {
                mesh,
                signal,
                label,
            });
        }
    }
    Ok(MeshDataset {
        items,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_mesh_has_exact_count_and_is_closed() {
        for n in [60, 123, 500] {
            let m = sphere_mesh(n, 1.0).unwrap();
            assert_eq!(m.num_vertices(), n);
            // Closed manifold: every edge has two faces (Euler: F = 2V - 4).
            assert_eq!(m.num_faces(), 2 * n - 4);
            for (fi, f) in m.faces().iter().enumerate() {
                for e in 0..3 {
                    assert!(m.neighbor_across(f[e], f[(e + 1) % 3], fi).is_some());
                }
            }
        }
    }

    #[test]
    fn sphere_radius_is_respected() {
        let m = sphere_mesh(100, 2.5).unwrap();
        for p in m.vertices() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            approx::assert_relative_eq!(r, 2.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn dataset_structure_and_determinism() {
        let a = synth_mesh_dataset(3, 2, 500, 42).unwrap();
        assert_eq!(a.items.len(), 6);
        assert_eq!(a.num_classes, 3);
        let nv = a.items[0].mesh.num_vertices();
        assert_eq!(nv, 500);
        for item in &a.items {
            assert_eq!(item.mesh.num_vertices(), nv);
            assert_eq!(item.signal.dim(), 4);
        }
        let b = synth_mesh_dataset(3, 2, 500, 42).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.mesh, y.mesh);
            assert_eq!(x.signal, y.signal);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn unsupported_resolution_is_an_error() {
        assert!(synth_mesh_dataset(2, 2, 640, 1).is_err());
    }

    #[test]
    fn descriptors_are_finite_across_the_dataset() {
        let ds = synth_mesh_dataset(4, 2, 500, 7).unwrap();
        for item in &ds.items {
            for v in item.signal.values().iter() {
                assert!(v.is_finite());
            }
        }
    }
}
