//! Geodesic rays by iterative triangle unfolding, and the per-bin angular
//! distance tables they seed.
//!
//! For each vertex, `J` rays leave the one-ring at equal fractions of the
//! total incident angle, the first aligned with an incident edge. A ray is
//! continued across the surface by flattening each successive triangle into
//! the plane and extending the straight line, recording the vertex it
//! passes closest to at every edge crossing. The recorded vertices seed a
//! Fast Marching run whose arrival times act as the angular distance from
//! that ray's direction.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::par::par_collect;

use super::{distance, fast_march, TriMesh};

/// Why a traced ray stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RayTermination {
    /// Reached the designated maximum length (also how circuits of closed
    /// meshes terminate).
    MaxLength,
    /// Hit the mesh boundary.
    Boundary,
    /// Crossed an edge without a consistent neighbor. Construction rejects
    /// such meshes, so this flags internal inconsistency defensively.
    NonManifold,
    /// Numerical stall: no forward edge intersection could be found.
    Stalled,
}

/// One traced geodesic ray.
#[derive(Debug, Clone)]
pub struct GeodesicRay {
    /// Vertices passed closest to, in first-passage order, deduplicated.
    pub vertices: Vec<usize>,
    pub termination: RayTermination,
    /// Arc length actually traced.
    pub length: f64,
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Traces `num_rays` geodesic rays from `v`, each limited to `max_length`.
pub fn trace_geodesic_rays(
    mesh: &TriMesh,
    v: usize,
    num_rays: usize,
    max_length: f64,
) -> Result<Vec<GeodesicRay>> {
    if num_rays == 0 {
        return Err(Error::InvalidArgument("need at least one ray".into()));
    }
    if !(max_length > 0.0 && max_length.is_finite()) {
        return Err(Error::InvalidArgument("max_length must be positive".into()));
    }
    if v >= mesh.num_vertices() {
        return Err(Error::InvalidArgument(format!("vertex {v} out of range")));
    }
    let fan = mesh.one_ring_fan(v)?; // errors on isolated vertices
    let sector_angles: Vec<f64> = fan
        .faces
        .iter()
        .map(|&f| mesh.corner_angle(f, v))
        .collect();
    let total_angle: f64 = sector_angles.iter().sum();
    // Cumulative angle of each incident edge (v -> ring[i]).
    let mut cumulative = vec![0.0; fan.ring.len()];
    for i in 0..sector_angles.len() {
        cumulative[i + 1] = cumulative[i] + sector_angles[i];
    }
    // First ray aligned with the incident edge of lowest opposite-vertex
    // index; ties cannot occur (ring vertices are distinct).
    let ring_span = if fan.is_boundary {
        fan.ring.len()
    } else {
        fan.ring.len() - 1 // last ring vertex repeats the first
    };
    let (start_idx, _) = fan.ring[..ring_span]
        .iter()
        .enumerate()
        .min_by_key(|&(_, w)| *w)
        .expect("non-empty ring");
    let base_angle = cumulative[start_idx];
    let rays = (0..num_rays)
        .map(|j| {
            let mut phi = base_angle + total_angle * j as f64 / num_rays as f64;
            if phi >= total_angle {
                phi -= total_angle;
            }
            trace_one_ray(mesh, v, &fan, &sector_angles, &cumulative, phi, max_length)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rays)
}

#[allow(clippy::too_many_arguments)]
fn trace_one_ray(
    mesh: &TriMesh,
    center: usize,
    fan: &super::OneRingFan,
    sector_angles: &[f64],
    cumulative: &[f64],
    phi: f64,
    max_length: f64,
) -> Result<GeodesicRay> {
    // Locate the fan sector containing the launch angle.
    let mut sector = sector_angles.len() - 1;
    for i in 0..sector_angles.len() {
        if phi < cumulative[i + 1] || i == sector_angles.len() - 1 {
            sector = i;
            break;
        }
    }
    let beta = (phi - cumulative[sector]).clamp(0.0, sector_angles[sector]);
    let w0 = fan.ring[sector];
    let w1 = fan.ring[sector + 1];
    let face = fan.faces[sector];
    // Flatten the launch triangle: center at the origin, w0 on +x.
    let pc = mesh.position(center);
    let (p0, p1) = (mesh.position(w0), mesh.position(w1));
    let d0 = distance(pc, p0);
    let d1 = distance(pc, p1);
    let ang = sector_angles[sector];
    let mut pa2 = [d0, 0.0];
    let mut pb2 = [d1 * ang.cos(), d1 * ang.sin()];
    let mut ia = w0;
    let mut ib = w1;
    let dir = [beta.cos(), beta.sin()];
    let mut current_face = face;
    // The 2D position of the triangle vertex we came from (initially the
    // center); used to place the next unfolded vertex on the far side.
    let mut p_prev2 = [0.0f64, 0.0];

    let mut recorded: Vec<usize> = Vec::new();
    let mut seen = vec![false; mesh.num_vertices()];
    let mut t_prev = 0.0f64;
    let step_cap = 16 * mesh.num_faces() + 64;
    let mut termination = RayTermination::MaxLength;
    let mut length = 0.0;
    for _ in 0..step_cap {
        // Intersect origin + t*dir with segment (pa2, pb2).
        let e = [pb2[0] - pa2[0], pb2[1] - pa2[1]];
        let denom = cross2(dir, e);
        if denom.abs() < 1e-300 {
            termination = RayTermination::Stalled;
            break;
        }
        let t = cross2(pa2, e) / denom;
        let s = cross2(pa2, dir) / denom;
        if !(t > t_prev - 1e-12) || !(-1e-9..=1.0 + 1e-9).contains(&s) {
            termination = RayTermination::Stalled;
            break;
        }
        let hit = [pa2[0] + s * e[0], pa2[1] + s * e[1]];
        length = t.max(t_prev);
        if length > max_length {
            termination = RayTermination::MaxLength;
            break;
        }
        // Record the nearer endpoint of the crossed edge (tie: lower index).
        let da = (hit[0] - pa2[0]).hypot(hit[1] - pa2[1]);
        let db = (hit[0] - pb2[0]).hypot(hit[1] - pb2[1]);
        let closest = if da < db || (da == db && ia < ib) { ia } else { ib };
        if !seen[closest] {
            seen[closest] = true;
            recorded.push(closest);
        }
        // Step across the crossed edge.
        let Some(next_face) = mesh.neighbor_across(ia, ib, current_face) else {
            termination = if mesh.edge_is_boundary(ia, ib) {
                RayTermination::Boundary
            } else {
                RayTermination::NonManifold
            };
            break;
        };
        let g = mesh.faces()[next_face];
        let ic = *g
            .iter()
            .find(|&&x| x != ia && x != ib)
            .expect("triangle has a third vertex");
        let dac = distance(mesh.position(ia), mesh.position(ic));
        let dbc = distance(mesh.position(ib), mesh.position(ic));
        let Some(pc2) = place_across_2d(pa2, pb2, dac, dbc, p_prev2) else {
            termination = RayTermination::Stalled;
            break;
        };
        // The ray continues into triangle (pa2, pb2, pc2); it exits through
        // (pa2, pc2) or (pc2, pb2) depending on which side of the ray the
        // new vertex lies.
        t_prev = t;
        if cross2(dir, pc2) > 0.0 {
            // c is to the left of the ray: exit edge is (a, c).
            p_prev2 = pb2;
            pb2 = pc2;
            ib = ic;
        } else {
            p_prev2 = pa2;
            pa2 = pc2;
            ia = ic;
        }
        current_face = next_face;
    }
    Ok(GeodesicRay {
        vertices: recorded,
        termination,
        length: length.min(max_length),
    })
}

/// 2D circle-circle placement of the unfolded vertex, on the opposite side
/// of line (a, b) from `other`.
fn place_across_2d(
    a: [f64; 2],
    b: [f64; 2],
    dac: f64,
    dbc: f64,
    other: [f64; 2],
) -> Option<[f64; 2]> {
    let ex = b[0] - a[0];
    let ey = b[1] - a[1];
    let l2 = ex * ex + ey * ey;
    if l2 <= 0.0 {
        return None;
    }
    let l = l2.sqrt();
    let x = (dac * dac - dbc * dbc + l2) / (2.0 * l);
    let h = (dac * dac - x * x).max(0.0).sqrt();
    let base = [a[0] + x * ex / l, a[1] + x * ey / l];
    let perp = [-ey / l, ex / l];
    let side = |p: [f64; 2]| ex * (p[1] - a[1]) - ey * (p[0] - a[0]);
    let so = side(other);
    let c_plus = [base[0] + h * perp[0], base[1] + h * perp[1]];
    if side(c_plus) * so <= 0.0 {
        return Some(c_plus);
    }
    let c_minus = [base[0] - h * perp[0], base[1] - h * perp[1]];
    if side(c_minus) * so <= 0.0 {
        return Some(c_minus);
    }
    None
}

/// The per-bin angular distance tensor.
#[derive(Debug, Clone)]
pub struct ThetaTable {
    /// `J x |V| x |V|`: arrival time of column vertex from ray `j` of the
    /// row vertex.
    pub tensor: Array3<f64>,
    /// `(vertex, ray)` pairs whose recorded list was empty and fell back to
    /// seeding with the center vertex.
    pub fallback_seeds: usize,
}

/// Builds the angular tables: for each vertex, each ray's recorded vertices
/// seed one Fast Marching run.
pub fn theta_table(mesh: &TriMesh, num_rays: usize, max_length: f64) -> Result<ThetaTable> {
    let n = mesh.num_vertices();
    let per_vertex = par_collect(n, |i| -> Result<(Vec<Vec<f64>>, usize)> {
        let rays = trace_geodesic_rays(mesh, i, num_rays, max_length)?;
        let mut rows = Vec::with_capacity(num_rays);
        let mut fallbacks = 0;
        for ray in &rays {
            let seeds: Vec<usize> = if ray.vertices.is_empty() {
                fallbacks += 1;
                vec![i]
            } else {
                ray.vertices.clone()
            };
            rows.push(fast_march(mesh, &seeds)?);
        }
        Ok((rows, fallbacks))
    });
    let mut tensor = Array3::<f64>::zeros((num_rays, n, n));
    let mut fallback_seeds = 0;
    for (i, item) in per_vertex.into_iter().enumerate() {
        let (rows, fallbacks) = item?;
        fallback_seeds += fallbacks;
        for (j, row) in rows.into_iter().enumerate() {
            for (v, t) in row.into_iter().enumerate() {
                tensor[[j, i, v]] = t;
            }
        }
    }
    Ok(ThetaTable {
        tensor,
        fallback_seeds,
    })
}

/// Default designated ray length: 2.5x a diameter estimate (the largest
/// arrival time over a strided 32-vertex sample of sources).
pub fn default_max_length(mesh: &TriMesh) -> Result<f64> {
    let n = mesh.num_vertices();
    let count = n.min(32);
    let stride = n.div_ceil(count);
    let sources: Vec<usize> = (0..n).step_by(stride).take(count).collect();
    let rows = par_collect(sources.len(), |i| fast_march(mesh, &[sources[i]]));
    let mut diameter = 0.0f64;
    for row in rows {
        for t in row? {
            if t.is_finite() {
                diameter = diameter.max(t);
            }
        }
    }
    if diameter <= 0.0 {
        return Err(Error::InvalidArgument(
            "mesh has no positive geodesic distances".into(),
        ));
    }
    Ok(2.5 * diameter)
}

#[cfg(test)]
mod tests {
    use super::super::planar_grid;
    use super::*;
    use rand::Rng;

    #[test]
    fn seed_angles_partition_total_angle() {
        let mesh = planar_grid(5, 5, 1.0, 1.0).unwrap();
        let center = 12;
        let fan = mesh.one_ring_fan(center).unwrap();
        let total: f64 = fan
            .faces
            .iter()
            .map(|&f| mesh.corner_angle(f, center))
            .sum();
        approx::assert_relative_eq!(total, std::f64::consts::TAU, max_relative = 1e-12);
        // Rays at equal increments of the total angle: check the increments
        // by construction.
        let j = 7;
        let rays = trace_geodesic_rays(&mesh, center, j, 3.0).unwrap();
        assert_eq!(rays.len(), j);
    }

    #[test]
    fn flat_rays_stay_near_their_line() {
        // On a flat mesh the unfolding is the identity, so recorded
        // vertices must lie within one triangle diameter of the exact
        // planar ray line.
        let (nx, ny) = (9, 9);
        let mesh = planar_grid(nx, ny, 1.0, 1.0).unwrap();
        let h = 1.0 / (nx as f64 - 1.0);
        let tri_diameter = h * 2.0f64.sqrt();
        let center = (ny / 2) * nx + nx / 2;
        let pc = mesh.position(center);
        let num_rays = 12;
        let rays = trace_geodesic_rays(&mesh, center, num_rays, 4.0).unwrap();
        // Recover each ray's planar direction from the fan geometry: the
        // first ray leaves along the lowest-index ring neighbor.
        let fan = mesh.one_ring_fan(center).unwrap();
        let ring_span = fan.ring.len() - 1;
        let (start_idx, _) = fan.ring[..ring_span]
            .iter()
            .enumerate()
            .min_by_key(|&(_, w)| *w)
            .unwrap();
        let sector_angles: Vec<f64> = fan
            .faces
            .iter()
            .map(|&f| mesh.corner_angle(f, center))
            .collect();
        let mut cumulative = vec![0.0; fan.ring.len()];
        for i in 0..sector_angles.len() {
            cumulative[i + 1] = cumulative[i] + sector_angles[i];
        }
        // Planar angle of the first fan edge.
        let w_start = fan.ring[start_idx];
        let p_start = mesh.position(w_start);
        let alpha0 = (p_start[1] - pc[1]).atan2(p_start[0] - pc[0]);
        // Fan orientation in the plane (counterclockwise or clockwise).
        let w_next = fan.ring[(start_idx + 1) % ring_span];
        let p_next = mesh.position(w_next);
        let alpha1 = (p_next[1] - pc[1]).atan2(p_next[0] - pc[0]);
        let mut diff = alpha1 - alpha0;
        while diff <= -std::f64::consts::PI {
            diff += std::f64::consts::TAU;
        }
        while diff > std::f64::consts::PI {
            diff -= std::f64::consts::TAU;
        }
        let orient = diff.signum();
        for (j, ray) in rays.iter().enumerate() {
            assert!(!ray.vertices.is_empty());
            let phi = alpha0
                + orient * std::f64::consts::TAU * j as f64 / num_rays as f64;
            let dir = [phi.cos(), phi.sin()];
            for &v in &ray.vertices {
                let p = mesh.position(v);
                let rel = [p[0] - pc[0], p[1] - pc[1]];
                let dist_to_line = (rel[0] * dir[1] - rel[1] * dir[0]).abs();
                let along = rel[0] * dir[0] + rel[1] * dir[1];
                assert!(
                    dist_to_line <= tri_diameter + 1e-9,
                    "ray {j}: vertex {v} at perpendicular distance {dist_to_line}"
                );
                assert!(along >= -tri_diameter, "ray {j}: vertex {v} behind the origin");
            }
        }
    }

    #[test]
    fn boundary_terminates_rays() {
        let mesh = planar_grid(4, 4, 1.0, 1.0).unwrap();
        let rays = trace_geodesic_rays(&mesh, 5, 6, 100.0).unwrap();
        for ray in rays {
            assert_eq!(ray.termination, RayTermination::Boundary);
        }
    }

    #[test]
    fn rays_error_on_invalid_input() {
        let mesh = planar_grid(3, 3, 1.0, 1.0).unwrap();
        assert!(trace_geodesic_rays(&mesh, 0, 0, 1.0).is_err());
        assert!(trace_geodesic_rays(&mesh, 99, 4, 1.0).is_err());
        assert!(trace_geodesic_rays(&mesh, 0, 4, -1.0).is_err());
    }

    #[test]
    fn closed_mesh_rays_terminate() {
        // Fuzz vertex/ray-count choices on a closed mesh; every ray must
        // stop via max length without an infinite loop.
        let mesh = crate::datasets::sphere_mesh(120, 1.0).unwrap();
        let max_length = default_max_length(&mesh).unwrap();
        let mut rng = crate::rng::subsystem_rng(50, "rays-test");
        for _ in 0..50 {
            let v = rng.random_range(0..mesh.num_vertices());
            let j = rng.random_range(1..9);
            let rays = trace_geodesic_rays(&mesh, v, j, max_length).unwrap();
            for ray in rays {
                assert!(matches!(
                    ray.termination,
                    RayTermination::MaxLength | RayTermination::Stalled
                ));
                assert!(ray.length <= max_length + 1e-9);
            }
        }
    }

    #[test]
    fn theta_table_shape_and_seed_zeroes() {
        let mesh = planar_grid(5, 5, 1.0, 1.0).unwrap();
        let table = theta_table(&mesh, 4, 3.0).unwrap();
        assert_eq!(table.tensor.shape(), &[4, 25, 25]);
        // A vertex on ray j's seed list has arrival 0 from that ray.
        let center = 12;
        let rays = trace_geodesic_rays(&mesh, center, 4, 3.0).unwrap();
        for (j, ray) in rays.iter().enumerate() {
            for &v in &ray.vertices {
                assert_eq!(table.tensor[[j, center, v]], 0.0);
            }
        }
    }

    #[test]
    fn theta_table_is_deterministic() {
        let mesh = planar_grid(4, 4, 1.0, 1.0).unwrap();
        let a = theta_table(&mesh, 3, 2.0).unwrap();
        let b = theta_table(&mesh, 3, 2.0).unwrap();
        assert_eq!(a.tensor, b.tensor);
    }

    #[test]
    fn flat_mesh_near_ray_targets_have_small_theta() {
        // A target sitting near ray j's line gets a much smaller value from
        // ray j than from the opposite ray.
        let mesh = planar_grid(9, 9, 1.0, 1.0).unwrap();
        let center = 4 * 9 + 4;
        let table = theta_table(&mesh, 4, 4.0).unwrap();
        let rays = trace_geodesic_rays(&mesh, center, 4, 4.0).unwrap();
        // Pick the farthest recorded vertex of ray 0 as the target.
        let &target = rays[0].vertices.last().unwrap();
        let near = table.tensor[[0, center, target]];
        let far = table.tensor[[2, center, target]];
        assert!(
            near + 1e-9 < far,
            "near-ray theta {near} not smaller than opposite-ray {far}"
        );
    }
}
