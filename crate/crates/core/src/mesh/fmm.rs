//! Fast Marching on triangulated surfaces: unit-speed wavefront arrival
//! times from a seed set.
//!
//! The update inside acute triangles is the Kimmel-Sethian eikonal solve;
//! obtuse corners fall back to the two-edge (Dijkstra-style) update. The
//! near field of each seed is initialized exactly: one-ring vertices get
//! their edge length, and vertices one unfolding away get the straightened
//! two-triangle geodesic. Point-source wavefronts are strongly curved near
//! the source, where the planar-front triangle update is weakest, so the
//! exact near field removes the dominant error term.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::par::par_collect;

use super::{distance, TriMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Far,
    Trial,
    Alive,
}

struct Trial {
    time: f64,
    vertex: usize,
}

impl PartialEq for Trial {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.vertex == other.vertex
    }
}

impl Eq for Trial {}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Trial {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on time, vertex index as deterministic tiebreak.
        other
            .time
            .partial_cmp(&self.time)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

/// Arrival times from `seeds` to every vertex (infinite where the wave
/// never arrives, e.g. across disconnected components).
pub fn fast_march(mesh: &TriMesh, seeds: &[usize]) -> Result<Vec<f64>> {
    Ok(fast_march_detailed(mesh, seeds)?.0)
}

/// Arrival times plus the heap acceptance order (for monotonicity checks).
pub fn fast_march_detailed(mesh: &TriMesh, seeds: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("fast marching needs at least one seed".into()));
    }
    let n = mesh.num_vertices();
    for &s in seeds {
        if s >= n {
            return Err(Error::InvalidArgument(format!("seed {s} out of range")));
        }
    }
    let mut time = vec![f64::INFINITY; n];
    let mut state = vec![State::Far; n];
    let mut heap = BinaryHeap::new();
    for &s in seeds {
        time[s] = 0.0;
        state[s] = State::Alive;
    }
    // Exact near field per seed.
    let budget = (WINDOW_BUDGET / seeds.len()).max(64);
    for &s in seeds {
        seed_near_field(mesh, s, budget, &mut time);
    }
    for v in 0..n {
        if state[v] == State::Far && time[v].is_finite() {
            state[v] = State::Trial;
            heap.push(Trial {
                time: time[v],
                vertex: v,
            });
        }
    }
    let mut acceptance = Vec::new();
    while let Some(Trial { time: t, vertex: v }) = heap.pop() {
        if state[v] == State::Alive || t > time[v] {
            continue;
        }
        state[v] = State::Alive;
        acceptance.push(v);
        // Update the far endpoints of every face containing v.
        for &fi in mesh.vertex_faces(v) {
            let f = mesh.faces()[fi];
            for target_pos in 0..3 {
                let target = f[target_pos];
                if state[target] == State::Alive {
                    continue;
                }
                let a = f[(target_pos + 1) % 3];
                let b = f[(target_pos + 2) % 3];
                if let Some(cand) = triangle_update(mesh, target, a, b, &time) {
                    if cand < time[target] {
                        time[target] = cand;
                        state[target] = State::Trial;
                        heap.push(Trial {
                            time: cand,
                            vertex: target,
                        });
                    }
                }
            }
        }
    }
    Ok((time, acceptance))
}

/// Recursion depth for the exact near-field windows. Cones partition the
/// direction space, so the node count grows roughly quadratically in depth.
const WINDOW_DEPTH: usize = 28;
/// Window node budget shared across the seed set of one run: point sources
/// get a deep exact field, polyline fronts (many seeds) a shallow one.
const WINDOW_BUDGET: usize = 24576;

/// Initializes the near field of seed `s` exactly: one-ring vertices get
/// their edge length, and farther vertices get straightened geodesics found
/// by recursively unfolding triangle strips. Each strip carries the cone of
/// directions whose straight rays from the seed cross its whole edge
/// sequence; a vertex whose unfolded position falls inside the cone
/// receives the exact strip geodesic.
#[doc(hidden)]
pub fn seed_near_field(mesh: &TriMesh, s: usize, budget: usize, time: &mut [f64]) {
    struct Window {
        face: usize,
        a: usize,
        b: usize,
        a2: [f64; 2],
        b2: [f64; 2],
        /// Vertex left behind when crossing into `face` (2D), used to place
        /// the next unfolded vertex on the far side.
        prev2: [f64; 2],
        /// Cone boundary directions, counterclockwise: cross(lo, hi) > 0.
        lo: [f64; 2],
        hi: [f64; 2],
        depth: usize,
    }
    let cr = |u: [f64; 2], v: [f64; 2]| u[0] * v[1] - u[1] * v[0];
    let unit = |v: [f64; 2]| -> [f64; 2] {
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if n > 0.0 {
            [v[0] / n, v[1] / n]
        } else {
            v
        }
    };
    // Rays grazing a vertex pinch the cone to zero width; a small tolerance
    // on unit-vector cross products keeps such geodesics alive.
    const CONE_TOL: f64 = 1e-12;
    let ps = mesh.position(s);
    // Breadth-first so shallow windows are never starved by deep ones.
    let mut queue: std::collections::VecDeque<Window> = std::collections::VecDeque::new();
    for &fi in mesh.vertex_faces(s) {
        let f = mesh.faces()[fi];
        let pos = f.iter().position(|&x| x == s).expect("incident");
        let a = f[(pos + 1) % 3];
        let b = f[(pos + 2) % 3];
        let (pa, pb) = (mesh.position(a), mesh.position(b));
        let (da, db) = (distance(ps, pa), distance(ps, pb));
        if da < time[a] {
            time[a] = da;
        }
        if db < time[b] {
            time[b] = db;
        }
        // Flatten (s, a, b): s at the origin, a on +x, b counterclockwise.
        let lab = distance(pa, pb);
        let cos_s = ((da * da + db * db - lab * lab) / (2.0 * da * db)).clamp(-1.0, 1.0);
        let sin_s = (1.0 - cos_s * cos_s).max(0.0).sqrt();
        let a2 = [da, 0.0];
        let b2 = [db * cos_s, db * sin_s];
        queue.push_back(Window {
            face: fi,
            a,
            b,
            a2,
            b2,
            prev2: [0.0, 0.0],
            lo: unit(a2),
            hi: unit(b2),
            depth: 0,
        });
    }
    let mut budget = budget;
    while let Some(w) = queue.pop_front() {
        if budget == 0 {
            break;
        }
        budget -= 1;
        let Some(nf) = mesh.neighbor_across(w.a, w.b, w.face) else {
            continue;
        };
        let g = mesh.faces()[nf];
        let c = *g
            .iter()
            .find(|&&x| x != w.a && x != w.b)
            .expect("third vertex");
        let (pa, pb, pc) = (mesh.position(w.a), mesh.position(w.b), mesh.position(c));
        let (dac, dbc) = (distance(pa, pc), distance(pb, pc));
        let Some(c2) = place_across(w.a2, w.b2, dac, dbc, w.prev2) else {
            continue;
        };
        // Exact geodesic when the straight ray to c stays in the window.
        let dir_c = unit(c2);
        if cr(w.lo, dir_c) >= -CONE_TOL && cr(dir_c, w.hi) >= -CONE_TOL {
            let d = (c2[0] * c2[0] + c2[1] * c2[1]).sqrt();
            if d < time[c] {
                time[c] = d;
            }
        }
        if w.depth + 1 >= WINDOW_DEPTH {
            continue;
        }
        // Sub-window across (a, c): directions between a2 and c2, clipped.
        let clip = |lo: [f64; 2], hi: [f64; 2]| -> Option<([f64; 2], [f64; 2])> {
            let lo2 = if cr(w.lo, lo) > 0.0 { lo } else { w.lo };
            let hi2 = if cr(hi, w.hi) > 0.0 { hi } else { w.hi };
            (cr(lo2, hi2) > -CONE_TOL).then_some((lo2, hi2))
        };
        let clip = |lo: [f64; 2], hi: [f64; 2]| clip(unit(lo), unit(hi));
        if let Some((lo, hi)) = clip(w.a2, c2) {
            queue.push_back(Window {
                face: nf,
                a: w.a,
                b: c,
                a2: w.a2,
                b2: c2,
                prev2: w.b2,
                lo,
                hi,
                depth: w.depth + 1,
            });
        }
        if let Some((lo, hi)) = clip(c2, w.b2) {
            queue.push_back(Window {
                face: nf,
                a: c,
                b: w.b,
                a2: c2,
                b2: w.b2,
                prev2: w.a2,
                lo,
                hi,
                depth: w.depth + 1,
            });
        }
    }
}

/// Places point `c` in 2D given its distances to `a` and `b`, on the
/// opposite side of line (a, b) from `other`. Returns `None` when the
/// distances are inconsistent (severely degenerate geometry).
fn place_across(a: [f64; 2], b: [f64; 2], dac: f64, dbc: f64, other: [f64; 2]) -> Option<[f64; 2]> {
    let ex = b[0] - a[0];
    let ey = b[1] - a[1];
    let l2 = ex * ex + ey * ey;
    if l2 <= 0.0 {
        return None;
    }
    let l = l2.sqrt();
    let x = (dac * dac - dbc * dbc + l2) / (2.0 * l);
    let h2 = dac * dac - x * x;
    let h = h2.max(0.0).sqrt();
    let base = [a[0] + x * ex / l, a[1] + x * ey / l];
    let perp = [-ey / l, ex / l];
    let c_plus = [base[0] + h * perp[0], base[1] + h * perp[1]];
    let c_minus = [base[0] - h * perp[0], base[1] - h * perp[1]];
    let side = |p: [f64; 2]| ex * (p[1] - a[1]) - ey * (p[0] - a[0]);
    let so = side(other);
    if side(c_plus) * so <= 0.0 {
        Some(c_plus)
    } else if side(c_minus) * so <= 0.0 {
        Some(c_minus)
    } else {
        None
    }
}

/// One eikonal update of `target` from the triangle `(target, a, b)`.
fn triangle_update(mesh: &TriMesh, target: usize, a: usize, b: usize, time: &[f64]) -> Option<f64> {
    let (mut ta, mut tb) = (time[a], time[b]);
    if ta.is_infinite() && tb.is_infinite() {
        return None;
    }
    let pt = mesh.position(target);
    let (mut pa, mut pb) = (mesh.position(a), mesh.position(b));
    if ta > tb {
        std::mem::swap(&mut ta, &mut tb);
        std::mem::swap(&mut pa, &mut pb);
    }
    let db = distance(pt, pa); // edge to the smaller-time vertex
    let da = distance(pt, pb);
    if tb.is_infinite() {
        return Some(ta + db);
    }
    let lab = distance(pa, pb);
    let cos_theta = ((da * da + db * db - lab * lab) / (2.0 * da * db)).clamp(-1.0, 1.0);
    let fallback = (ta + db).min(tb + da);
    if cos_theta < 0.0 {
        // Obtuse corner at the target: two-edge update. Right angles keep
        // the quadratic (its admissibility window is (0, inf) there).
        return Some(fallback);
    }
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    let u = tb - ta;
    let qa = da * da + db * db - 2.0 * da * db * cos_theta;
    let qb = 2.0 * db * u * (da * cos_theta - db);
    let qc = db * db * (u * u - da * da * sin_theta * sin_theta);
    if qa.abs() < 1e-300 {
        return Some(fallback);
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return Some(fallback);
    }
    let sq = disc.sqrt();
    let t1 = (-qb + sq) / (2.0 * qa);
    let t2 = (-qb - sq) / (2.0 * qa);
    let t = match (t1 > u, t2 > u) {
        (true, true) => t1.min(t2),
        (true, false) => t1,
        (false, true) => t2,
        (false, false) => return Some(fallback),
    };
    // The characteristic must enter through the triangle interior.
    if t <= 0.0 {
        return Some(fallback);
    }
    let ratio = db * (t - u) / t;
    if ratio <= da * cos_theta || (cos_theta > 0.0 && ratio >= da / cos_theta) {
        return Some(fallback);
    }
    Some((ta + t).min(fallback))
}

/// Symmetrized all-pairs geodesic distance table.
#[derive(Debug, Clone)]
pub struct RhoTable {
    pub matrix: Array2<f64>,
    /// Largest relative asymmetry `|A - A^T| / max(A)` observed before
    /// symmetrization.
    pub max_asymmetry: f64,
}

/// Runs Fast Marching from every vertex (in parallel) and averages the
/// result with its transpose; the raw per-source tables are not exactly
/// symmetric because acceptance orders differ.
pub fn rho_table(mesh: &TriMesh) -> Result<RhoTable> {
    let n = mesh.num_vertices();
    let rows = par_collect(n, |i| fast_march(mesh, &[i]));
    let mut raw = Array2::<f64>::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (j, v) in row.into_iter().enumerate() {
            raw[[i, j]] = v;
        }
    }
    let scale = raw.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let mut max_asym: f64 = 0.0;
    let mut matrix = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (raw[[i, j]], raw[[j, i]]);
            if a.is_finite() && b.is_finite() {
                if scale > 0.0 {
                    max_asym = max_asym.max((a - b).abs() / scale);
                }
                matrix[[i, j]] = 0.5 * (a + b);
            } else {
                matrix[[i, j]] = f64::INFINITY;
            }
        }
        matrix[[i, i]] = 0.0;
    }
    Ok(RhoTable {
        matrix,
        max_asymmetry: max_asym,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{planar_grid, tetrahedron};
    use super::*;

    #[test]
    fn seeds_have_zero_time() {
        let mesh = tetrahedron();
        let t = fast_march(&mesh, &[2]).unwrap();
        assert_eq!(t[2], 0.0);
        assert!(t.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_seed_set_is_an_error() {
        let mesh = tetrahedron();
        assert!(matches!(
            fast_march(&mesh, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn direct_edge_is_an_upper_bound() {
        let mesh = tetrahedron();
        let t = fast_march(&mesh, &[0]).unwrap();
        for v in 1..4 {
            let edge = distance(mesh.position(0), mesh.position(v));
            assert!(t[v] <= edge + 1e-9, "t[{v}] = {} > edge {edge}", t[v]);
        }
    }

    #[test]
    fn flat_square_corner_to_corner() {
        let mesh = planar_grid(10, 10, 1.0, 1.0).unwrap();
        let t = fast_march(&mesh, &[0]).unwrap();
        let target = mesh.num_vertices() - 1;
        let exact = 2.0f64.sqrt();
        let rel = (t[target] - exact).abs() / exact;
        assert!(rel < 0.02, "corner arrival {} vs {exact} ({rel:.4})", t[target]);
    }

    #[test]
    fn acceptance_order_is_monotone() {
        let mesh = planar_grid(8, 8, 1.0, 1.0).unwrap();
        let (t, order) = fast_march_detailed(&mesh, &[3]).unwrap();
        for pair in order.windows(2) {
            assert!(t[pair[0]] <= t[pair[1]] + 1e-12);
        }
    }

    #[test]
    fn bounded_by_dijkstra_above_and_chord_below() {
        let mesh = planar_grid(7, 7, 1.0, 1.0).unwrap();
        // Edge-graph Dijkstra upper bound.
        let mut edges = Vec::new();
        for f in mesh.faces() {
            for e in 0..3 {
                let a = f[e];
                let b = f[(e + 1) % 3];
                if a < b {
                    edges.push((a, b, distance(mesh.position(a), mesh.position(b))));
                }
            }
        }
        edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        edges.dedup_by(|x, y| (x.0, x.1) == (y.0, y.1));
        let g = crate::graph::Graph::new(mesh.num_vertices(), &edges).unwrap();
        let dij = g.shortest_path_distances(0).unwrap();
        let t = fast_march(&mesh, &[0]).unwrap();
        for v in 0..mesh.num_vertices() {
            assert!(t[v] <= dij[v] + 1e-9, "v={v}: fmm {} > dijkstra {}", t[v], dij[v]);
            let chord = distance(mesh.position(0), mesh.position(v));
            assert!(t[v] >= chord - 1e-9, "v={v}: fmm {} < chord {chord}", t[v]);
        }
    }

    #[test]
    fn rho_table_zero_diagonal_and_planar_accuracy() {
        let mesh = planar_grid(8, 8, 1.0, 1.0).unwrap();
        let table = rho_table(&mesh).unwrap();
        let n = mesh.num_vertices();
        for i in 0..n {
            assert_eq!(table.matrix[[i, i]], 0.0);
        }
        assert!(table.max_asymmetry <= 0.05, "asymmetry {}", table.max_asymmetry);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let euclid = distance(mesh.position(i), mesh.position(j));
                let rel = (table.matrix[[i, j]] - euclid).abs() / euclid;
                assert!(
                    rel <= 0.02,
                    "pair ({i},{j}): fmm {} vs euclid {euclid} ({rel:.4})",
                    table.matrix[[i, j]]
                );
            }
        }
    }

    #[test]
    fn multi_seed_takes_nearest_front() {
        let mesh = planar_grid(6, 6, 1.0, 1.0).unwrap();
        let a = fast_march(&mesh, &[0]).unwrap();
        let b = fast_march(&mesh, &[35]).unwrap();
        let both = fast_march(&mesh, &[0, 35]).unwrap();
        for v in 0..36 {
            assert!(both[v] <= a[v].min(b[v]) + 1e-9);
        }
    }
}
