//! Triangular meshes and their geodesic preprocessing: Fast Marching
//! distances for the radial tables and geodesic ray unfolding for the
//! angular tables.

mod fmm;
mod rays;

pub use fmm::{fast_march, fast_march_detailed, rho_table, seed_near_field, RhoTable};
pub use rays::{
    default_max_length, theta_table, trace_geodesic_rays, GeodesicRay, RayTermination,
    ThetaTable,
};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::weighting::{AngularCoords, PairCoordinates};

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm(sub(a, b))
}

/// An oriented manifold triangle mesh (boundary allowed). Construction
/// validates face indices, rejects degenerate faces, and checks that each
/// undirected edge belongs to at most two faces with consistent
/// orientation, which the unfolding machinery relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    /// Undirected edge -> the one or two adjacent faces.
    edge_faces: HashMap<(usize, usize), [Option<usize>; 2]>,
    /// Faces incident to each vertex.
    vertex_faces: Vec<Vec<usize>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let nv = vertices.len();
        if nv == 0 {
            return Err(Error::InvalidArgument("mesh has no vertices".into()));
        }
        let mut edge_faces: HashMap<(usize, usize), [Option<usize>; 2]> = HashMap::new();
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        let mut vertex_faces = vec![Vec::new(); nv];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= nv {
                    return Err(Error::InvalidArgument(format!(
                        "face {fi} references vertex {v} out of range"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidArgument(format!(
                    "face {fi} repeats a vertex"
                )));
            }
            let area = face_area(&vertices, *f);
            if area <= 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "face {fi} is degenerate (area {area:.3e})"
                )));
            }
            for e in 0..3 {
                let a = f[e];
                let b = f[(e + 1) % 3];
                if directed.insert((a, b), fi).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "directed edge ({a},{b}) appears twice; mesh is not consistently oriented"
                    )));
                }
                let key = (a.min(b), a.max(b));
                let slot = edge_faces.entry(key).or_insert([None, None]);
                if slot[0].is_none() {
                    slot[0] = Some(fi);
                } else if slot[1].is_none() {
                    slot[1] = Some(fi);
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "edge ({},{}) belongs to more than two faces",
                        key.0, key.1
                    )));
                }
            }
            for &v in f {
                vertex_faces[v].push(fi);
            }
        }
        Ok(TriMesh {
            vertices,
            faces,
            edge_faces,
            vertex_faces,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn position(&self, v: usize) -> [f64; 3] {
        self.vertices[v]
    }

    pub fn vertex_faces(&self, v: usize) -> &[usize] {
        &self.vertex_faces[v]
    }

    /// The other face sharing undirected edge `(a, b)`, if any.
    pub fn neighbor_across(&self, a: usize, b: usize, face: usize) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        let slot = self.edge_faces.get(&key)?;
        match *slot {
            [Some(f0), Some(f1)] => {
                if f0 == face {
                    Some(f1)
                } else if f1 == face {
                    Some(f0)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    pub fn edge_is_boundary(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        matches!(self.edge_faces.get(&key), Some([Some(_), None]))
    }

    /// Total surface area.
    pub fn area(&self) -> f64 {
        self.faces
            .iter()
            .map(|&f| face_area(&self.vertices, f))
            .sum()
    }

    /// The ordered one-ring fan around `v`: faces `f_i` spanning ring
    /// vertices `w_i, w_{i+1}`. For an interior vertex the ring closes
    /// (`ring.len() == faces.len() + 1` with `ring[0] == ring[last]`
    /// collapsed: here `ring.len() == faces.len()` and wraps); for a
    /// boundary vertex the fan is open.
    pub fn one_ring_fan(&self, v: usize) -> Result<OneRingFan> {
        let incident = &self.vertex_faces[v];
        if incident.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "vertex {v} has no incident faces"
            )));
        }
        // Map each face to its (prev, next) ring vertices in orientation
        // order: face (v, p, q) contributes sector from p to q.
        let mut sector: HashMap<usize, (usize, usize)> = HashMap::new();
        for &fi in incident {
            let f = self.faces[fi];
            let pos = f.iter().position(|&x| x == v).expect("incident");
            let p = f[(pos + 1) % 3];
            let q = f[(pos + 2) % 3];
            sector.insert(fi, (p, q));
        }
        // Find a starting face: one whose 'p' edge is boundary, else any.
        let mut start = incident[0];
        let mut is_boundary = false;
        for &fi in incident {
            let (p, _) = sector[&fi];
            if self.edge_is_boundary(v, p) {
                start = fi;
                is_boundary = true;
                break;
            }
        }
        // Walk the fan from start through shared edges.
        let mut faces = Vec::with_capacity(incident.len());
        let mut ring = Vec::with_capacity(incident.len() + 1);
        let mut current = start;
        let (p0, _) = sector[&current];
        ring.push(p0);
        loop {
            faces.push(current);
            let (_, q) = sector[&current];
            ring.push(q);
            match self.neighbor_across(v, q, current) {
                Some(next) if next != start => current = next,
                Some(_) => break, // closed the loop
                None => {
                    is_boundary = true;
                    break;
                }
            }
            if faces.len() > incident.len() {
                return Err(Error::InvalidArgument(format!(
                    "one-ring walk around vertex {v} did not terminate"
                )));
            }
        }
        if faces.len() != incident.len() {
            return Err(Error::InvalidArgument(format!(
                "one-ring of vertex {v} is not a single fan"
            )));
        }
        Ok(OneRingFan {
            center: v,
            faces,
            ring,
            is_boundary,
        })
    }

    /// Interior angle of `face` at vertex `v`.
    pub fn corner_angle(&self, face: usize, v: usize) -> f64 {
        let f = self.faces[face];
        let pos = f.iter().position(|&x| x == v).expect("vertex in face");
        let a = self.vertices[f[pos]];
        let b = self.vertices[f[(pos + 1) % 3]];
        let c = self.vertices[f[(pos + 2) % 3]];
        let u = sub(b, a);
        let w = sub(c, a);
        let cosv = (dot(u, w) / (norm(u) * norm(w))).clamp(-1.0, 1.0);
        cosv.acos()
    }
}

pub(crate) fn face_area(vertices: &[[f64; 3]], f: [usize; 3]) -> f64 {
    let u = sub(vertices[f[1]], vertices[f[0]]);
    let v = sub(vertices[f[2]], vertices[f[0]]);
    0.5 * norm(cross(u, v))
}

/// The ordered fan of faces around a vertex.
#[derive(Debug, Clone)]
pub struct OneRingFan {
    pub center: usize,
    /// Faces in rotational order.
    pub faces: Vec<usize>,
    /// Ring vertices: `faces[i]` spans `ring[i] .. ring[i+1]`. For a closed
    /// fan, `ring[faces.len()] == ring[0]`.
    pub ring: Vec<usize>,
    pub is_boundary: bool,
}

/// Geodesic lookup tables for one mesh: the radial distance matrix and the
/// per-bin angular distance tensor.
#[derive(Debug, Clone)]
pub struct GeodesicTables {
    pub rho: Array2<f64>,
    pub max_rho_asymmetry: f64,
    pub theta: Array3<f64>,
    /// Number of `(vertex, ray)` pairs whose seed list was empty and fell
    /// back to the center vertex.
    pub fallback_seeds: usize,
}

impl GeodesicTables {
    /// Builds both tables.
    pub fn compute(mesh: &TriMesh, num_angular: usize, max_length: f64) -> Result<Self> {
        let rho = rho_table(mesh)?;
        let theta = theta_table(mesh, num_angular, max_length)?;
        Ok(GeodesicTables {
            rho: rho.matrix,
            max_rho_asymmetry: rho.max_asymmetry,
            theta: theta.tensor,
            fallback_seeds: theta.fallback_seeds,
        })
    }

    /// View as pair coordinates for the weighting machinery.
    pub fn into_pair_coordinates(self) -> Result<PairCoordinates> {
        PairCoordinates::new(self.rho, AngularCoords::PerBin(self.theta))
    }
}

/// A flat triangulated `width x height` rectangle with `nx x ny` vertices
/// and alternating diagonals (every interior vertex of the even sublattice
/// sees a full 45-degree fan, which keeps Fast Marching errors low).
pub fn planar_grid(nx: usize, ny: usize, width: f64, height: f64) -> Result<TriMesh> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument("planar grid needs at least 2x2 vertices".into()));
    }
    let mut vertices = Vec::with_capacity(nx * ny);
    for r in 0..ny {
        for c in 0..nx {
            vertices.push([
                width * c as f64 / (nx - 1) as f64,
                height * r as f64 / (ny - 1) as f64,
                0.0,
            ]);
        }
    }
    let idx = |r: usize, c: usize| r * nx + c;
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for r in 0..ny - 1 {
        for c in 0..nx - 1 {
            let (v00, v10, v01, v11) = (idx(r, c), idx(r, c + 1), idx(r + 1, c), idx(r + 1, c + 1));
            if (r + c) % 2 == 0 {
                faces.push([v00, v10, v11]);
                faces.push([v00, v11, v01]);
            } else {
                faces.push([v00, v10, v01]);
                faces.push([v10, v11, v01]);
            }
        }
    }
    TriMesh::new(vertices, faces)
}

/// Loads a mesh from OFF or OBJ (by extension); triangles only.
pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    match ext.as_str() {
        "off" => read_off(reader),
        "obj" => read_obj(reader),
        other => Err(Error::Format(format!(
            "unsupported mesh extension '{other}' (expected .off or .obj)"
        ))),
    }
}

/// Saves a mesh as OFF or OBJ (by extension); positions and faces only.
pub fn save_mesh(mesh: &TriMesh, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let mut w = BufWriter::new(File::create(path)?);
    match ext.as_str() {
        "off" => {
            writeln!(w, "OFF")?;
            writeln!(w, "{} {} 0", mesh.num_vertices(), mesh.num_faces())?;
            for p in mesh.vertices() {
                writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
            }
            for f in mesh.faces() {
                writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
            }
        }
        "obj" => {
            for p in mesh.vertices() {
                writeln!(w, "v {} {} {}", p[0], p[1], p[2])?;
            }
            for f in mesh.faces() {
                writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
            }
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported mesh extension '{other}' (expected .off or .obj)"
            )))
        }
    }
    w.flush()?;
    Ok(())
}

fn read_off(reader: impl BufRead) -> Result<TriMesh> {
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| match l {
            Ok(text) => {
                let t = text.trim();
                !t.is_empty() && !t.starts_with('#')
            }
            Err(_) => true,
        });
    let (lineno, first) = lines
        .next()
        .ok_or_else(|| Error::Format("empty OFF file".into()))?;
    let first = first?;
    let mut counts_line = None;
    let trimmed = first.trim();
    if trimmed == "OFF" {
        // counts on the next line
    } else if let Some(rest) = trimmed.strip_prefix("OFF") {
        counts_line = Some((lineno, rest.trim().to_string()));
    } else {
        return Err(Error::Format(format!(
            "line {lineno}: expected OFF header, got '{trimmed}'"
        )));
    }
    let (lineno, counts) = match counts_line {
        Some(c) => c,
        None => {
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::Format("OFF file ends after header".into()))?;
            (n, l?)
        }
    };
    let parts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("line {lineno}: bad OFF counts '{counts}'")))?;
    if parts.len() < 2 {
        return Err(Error::Format(format!(
            "line {lineno}: OFF counts need vertices and faces"
        )));
    }
    let (nv, nf) = (parts[0], parts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| Error::Format("OFF file ends inside vertex block".into()))?;
        let line = line?;
        let xs: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {lineno}: bad vertex '{line}'")))?;
        if xs.len() != 3 {
            return Err(Error::Format(format!(
                "line {lineno}: vertex needs 3 coordinates"
            )));
        }
        vertices.push([xs[0], xs[1], xs[2]]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| Error::Format("OFF file ends inside face block".into()))?;
        let line = line?;
        let xs: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {lineno}: bad face '{line}'")))?;
        if xs.first() != Some(&3) || xs.len() != 4 {
            return Err(Error::Format(format!(
                "line {lineno}: only triangle faces are supported"
            )));
        }
        faces.push([xs[1], xs[2], xs[3]]);
    }
    TriMesh::new(vertices, faces)
}

fn read_obj(reader: impl BufRead) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut toks = t.split_whitespace();
        match toks.next() {
            Some("v") => {
                let xs: Vec<f64> = toks
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Format(format!("line {lineno}: bad vertex")))?;
                if xs.len() < 3 {
                    return Err(Error::Format(format!(
                        "line {lineno}: vertex needs 3 coordinates"
                    )));
                }
                vertices.push([xs[0], xs[1], xs[2]]);
            }
            Some("f") => {
                let ids: Vec<usize> = toks
                    .map(|x| {
                        // "i", "i/t", "i/t/n" forms; indices are 1-based.
                        x.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .map_err(|_| Error::Format(format!("line {lineno}: bad face index")))
                    })
                    .collect::<Result<_>>()?;
                if ids.len() != 3 {
                    return Err(Error::Format(format!(
                        "line {lineno}: only triangle faces are supported"
                    )));
                }
                if ids.iter().any(|&i| i == 0) {
                    return Err(Error::Format(format!(
                        "line {lineno}: OBJ indices are 1-based"
                    )));
                }
                faces.push([ids[0] - 1, ids[1] - 1, ids[2] - 1]);
            }
            _ => {} // ignore normals, texture coords, groups
        }
    }
    TriMesh::new(vertices, faces)
}

#[cfg(test)]
pub(crate) fn tetrahedron() -> TriMesh {
    TriMesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ],
        vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tetrahedron_is_valid_closed_manifold() {
        let m = tetrahedron();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_faces(), 4);
        for f in 0..4 {
            let face = m.faces()[f];
            for e in 0..3 {
                let a = face[e];
                let b = face[(e + 1) % 3];
                assert!(m.neighbor_across(a, b, f).is_some());
            }
        }
    }

    #[test]
    fn construction_rejects_bad_meshes() {
        // Degenerate face.
        assert!(TriMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .is_err());
        // Out-of-range index.
        assert!(TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![[0, 1, 5]]).is_err());
        // Inconsistent orientation: same directed edge twice.
        assert!(TriMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.5],
            ],
            vec![[0, 1, 2], [0, 1, 3]],
        )
        .is_err());
    }

    #[test]
    fn planar_grid_shape_and_area() {
        let m = planar_grid(5, 4, 1.0, 1.0).unwrap();
        assert_eq!(m.num_vertices(), 20);
        assert_eq!(m.num_faces(), 2 * 4 * 3);
        approx::assert_relative_eq!(m.area(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn one_ring_fan_interior_and_boundary() {
        let m = planar_grid(3, 3, 1.0, 1.0).unwrap();
        let fan = m.one_ring_fan(4).unwrap(); // center vertex
        assert!(!fan.is_boundary);
        assert_eq!(fan.faces.len(), m.vertex_faces(4).len());
        let total: f64 = fan.faces.iter().map(|&f| m.corner_angle(f, 4)).sum();
        approx::assert_relative_eq!(total, std::f64::consts::TAU, max_relative = 1e-12);

        let fan = m.one_ring_fan(0).unwrap(); // corner vertex
        assert!(fan.is_boundary);
        let total: f64 = fan.faces.iter().map(|&f| m.corner_angle(f, 0)).sum();
        approx::assert_relative_eq!(
            total,
            std::f64::consts::FRAC_PI_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn off_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.off");
        let m = tetrahedron();
        save_mesh(&m, &path).unwrap();
        let loaded = load_mesh(&path).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.obj");
        let m = tetrahedron();
        save_mesh(&m, &path).unwrap();
        let loaded = load_mesh(&path).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn off_fixture_parses() {
        let text = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n";
        let m = read_off(std::io::Cursor::new(text)).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_faces(), 4);
    }

    #[test]
    fn non_triangle_face_is_a_parse_error() {
        let text = "OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n4 0 1 2 3\n";
        let err = read_off(std::io::Cursor::new(text)).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("triangle"), "{msg}"),
            other => panic!("expected format error, got {other}"),
        }
    }
}
