//! Superpixel graph construction: per image, k-means over foreground and
//! background pixels separately (two thirds / one third of the vertex
//! budget), centroids as vertices, edges from thresholded centroid
//! distances.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{Graph, Signal};
use crate::rng::subsystem_rng;
use crate::weighting::{AngularCoords, PairCoordinates};

use super::kmeans;

/// Pixel intensities are scaled to `[0, VALUE_SCALE]` inside the k-means
/// feature vector so value and position contribute on comparable scales
/// (positions span a 28-pixel grid).
const VALUE_SCALE: f64 = 27.0;

/// One image as a superpixel graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGraph {
    /// Centroid positions `(x = column, y = row)` in pixel coordinates;
    /// foreground clusters first, then background.
    pub centroids: Vec<[f64; 2]>,
    /// Mean intensity of each superpixel in `[0, 1]`.
    pub values: Vec<f64>,
    /// Undirected edges (canonical `u < v`).
    pub edges: Vec<(usize, usize)>,
    pub label: usize,
}

impl SuperpixelGraph {
    pub fn num_vertices(&self) -> usize {
        self.centroids.len()
    }

    /// The unit-weight graph plus the intensity signal.
    pub fn to_graph_signal(&self) -> Result<(Graph, Signal)> {
        let edges: Vec<(usize, usize, f64)> =
            self.edges.iter().map(|&(u, v)| (u, v, 1.0)).collect();
        let graph = Graph::new(self.num_vertices(), &edges)?;
        let signal = Signal::from_column(self.values.clone())?;
        Ok((graph, signal))
    }
}

/// Builds the superpixel graph of one image (row-major `rows x cols`
/// grayscale bytes). Foreground = intensity > 0. When one group has fewer
/// pixels than requested clusters the shortfall shifts to the other group;
/// on real MNIST digits this never triggers. `edge_threshold = None`
/// selects the smallest distance that connects the graph.
pub fn build_superpixels(
    image: &[u8],
    rows: usize,
    cols: usize,
    label: usize,
    k_fg: usize,
    k_bg: usize,
    edge_threshold: Option<f64>,
    seed: u64,
) -> Result<SuperpixelGraph> {
    if image.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "image has {} pixels, expected {rows}x{cols}",
            image.len()
        )));
    }
    let total = k_fg + k_bg;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = image[r * cols + c];
            let feature = vec![
                c as f64,
                r as f64,
                v as f64 / 255.0 * VALUE_SCALE,
            ];
            if v > 0 {
                fg.push(feature);
            } else {
                bg.push(feature);
            }
        }
    }
    // Shift shortfall between groups so the total stays fixed.
    let mut k_fg_eff = k_fg.min(fg.len());
    let mut k_bg_eff = k_bg.min(bg.len());
    if k_fg_eff < k_fg {
        k_bg_eff = (k_bg + (k_fg - k_fg_eff)).min(bg.len());
    }
    if k_bg_eff < k_bg {
        k_fg_eff = (k_fg + (k_bg - k_bg_eff)).min(fg.len());
    }
    if k_fg_eff + k_bg_eff != total {
        return Err(Error::InvalidArgument(format!(
            "image has too few pixels for {total} superpixels ({} fg, {} bg)",
            fg.len(),
            bg.len()
        )));
    }
    let mut rng = subsystem_rng(seed, "superpixel-kmeans");
    let mut centroids = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total);
    for (points, k) in [(&fg, k_fg_eff), (&bg, k_bg_eff)] {
        if k == 0 {
            continue;
        }
        for c in kmeans(points, k, 100, &mut rng)? {
            centroids.push([c[0], c[1]]);
            values.push(c[2] / VALUE_SCALE);
        }
    }
    let threshold = match edge_threshold {
        Some(t) => {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "edge threshold must be positive, got {t}"
                )));
            }
            t
        }
        None => minimal_connecting_threshold(&centroids),
    };
    let mut edges = Vec::new();
    for u in 0..total {
        for v in (u + 1)..total {
            if centroid_distance(centroids[u], centroids[v]) < threshold {
                edges.push((u, v));
            }
        }
    }
    Ok(SuperpixelGraph {
        centroids,
        values,
        edges,
        label,
    })
}

fn centroid_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// The smallest threshold (just above a realized pairwise distance) whose
/// strict-less-than edge rule yields a connected graph, found by binary
/// search over the sorted candidate distances.
fn minimal_connecting_threshold(centroids: &[[f64; 2]]) -> f64 {
    let n = centroids.len();
    if n <= 1 {
        return 1.0;
    }
    let mut ds: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            ds.push(centroid_distance(centroids[u], centroids[v]));
        }
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ds.dedup();
    let connected = |limit: f64| -> bool {
        // Union-find over edges with distance <= limit.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = n;
        for u in 0..n {
            for v in (u + 1)..n {
                if centroid_distance(centroids[u], centroids[v]) <= limit {
                    let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
                    if ru != rv {
                        parent[ru] = rv;
                        components -= 1;
                    }
                }
            }
        }
        components == 1
    };
    let mut lo = 0usize;
    let mut hi = ds.len() - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if connected(ds[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    ds[lo].next_up()
}

/// Builds superpixel graphs for the selected images of a dataset, one
/// image per parallel task, seeded per image index.
pub fn build_superpixels_batch(
    images: &super::ImageDataset,
    indices: &[usize],
    k_fg: usize,
    k_bg: usize,
    edge_threshold: Option<f64>,
    seed: u64,
) -> Result<Vec<SuperpixelGraph>> {
    for &i in indices {
        if i >= images.num {
            return Err(Error::InvalidArgument(format!(
                "image index {i} out of range for {} images",
                images.num
            )));
        }
    }
    let graphs = crate::par::par_collect(indices.len(), |pos| {
        let i = indices[pos];
        build_superpixels(
            images.image(i),
            images.rows,
            images.cols,
            images.labels[i] as usize,
            k_fg,
            k_bg,
            edge_threshold,
            crate::rng::derive_seed(seed, &format!("superpixel-{i}")),
        )
    });
    graphs.into_iter().collect()
}

/// Pair coordinates over centroid geometry: Euclidean radial distance and
/// the displacement angle `atan2(dy, dx)` in `[0, 2*pi)`.
pub fn superpixel_coords(spg: &SuperpixelGraph) -> Result<PairCoordinates> {
    let n = spg.num_vertices();
    let mut rho = Array2::<f64>::zeros((n, n));
    let mut theta = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for v in 0..n {
            if i == v {
                continue;
            }
            rho[[i, v]] = centroid_distance(spg.centroids[i], spg.centroids[v]);
            let dy = spg.centroids[v][1] - spg.centroids[i][1];
            let dx = spg.centroids[v][0] - spg.centroids[i][0];
            let mut a = dy.atan2(dx);
            if a < 0.0 {
                a += TAU;
            }
            if a >= TAU {
                a = 0.0;
            }
            theta[[i, v]] = a;
        }
    }
    // Exact symmetry: distances are recomputed per ordered pair, so round
    // to the canonical (min-index-first) evaluation.
    for i in 0..n {
        for v in 0..i {
            rho[[v, i]] = rho[[i, v]];
        }
    }
    PairCoordinates::new(rho, AngularCoords::Angles(theta))
}

/// Writes a dataset of superpixel graphs: a `gcgp-spgraphs N C` header,
/// then per item an `item LABEL` line, the edge-list block, a `centroids`
/// marker, and one `x y` line per vertex.
pub fn write_superpixel_dataset(
    w: &mut impl Write,
    items: &[SuperpixelGraph],
    num_classes: usize,
) -> Result<()> {
    writeln!(w, "gcgp-spgraphs {} {}", items.len(), num_classes)?;
    for item in items {
        writeln!(w, "item {}", item.label)?;
        let (graph, signal) = item.to_graph_signal()?;
        crate::graph::write_graph_signal(w, &graph, &signal)?;
        writeln!(w, "centroids")?;
        for c in &item.centroids {
            writeln!(w, "{} {}", c[0], c[1])?;
        }
    }
    Ok(())
}

/// Reads a dataset written by [`write_superpixel_dataset`].
pub fn read_superpixel_dataset(r: &mut impl BufRead) -> Result<(Vec<SuperpixelGraph>, usize)> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "gcgp-spgraphs" {
        return Err(Error::Format(format!(
            "bad superpixel dataset header '{}'",
            header.trim()
        )));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| Error::Format("bad item count".into()))?;
    let num_classes: usize = toks[2]
        .parse()
        .map_err(|_| Error::Format("bad class count".into()))?;
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let label: usize = line
            .trim()
            .strip_prefix("item ")
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected 'item LABEL', got '{}'", line.trim())))?;
        let (graph, signal) = crate::graph::read_graph_signal(r)?;
        let mut marker = String::new();
        r.read_line(&mut marker)?;
        if marker.trim() != "centroids" {
            return Err(Error::Format(format!(
                "expected 'centroids' marker, got '{}'",
                marker.trim()
            )));
        }
        let mut centroids = Vec::with_capacity(graph.num_vertices());
        for _ in 0..graph.num_vertices() {
            let mut cline = String::new();
            r.read_line(&mut cline)?;
            let xs: Vec<f64> = cline
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("bad centroid line '{}'", cline.trim())))?;
            if xs.len() != 2 {
                return Err(Error::Format("centroid line needs 'x y'".into()));
            }
            centroids.push([xs[0], xs[1]]);
        }
        let edges = graph.edges().iter().map(|&(u, v, _)| (u, v)).collect();
        let values = signal.values().column(0).to_vec();
        items.push(SuperpixelGraph {
            centroids,
            values,
            edges,
            label,
        });
    }
    Ok((items, num_classes))
}

/// A synthetic digit-like test image: a filled blob with an intensity ramp,
/// enough foreground for the standard 50/25 split.
#[cfg(test)]
pub(crate) fn blob_image(rows: usize, cols: usize, cx: f64, cy: f64, radius: f64) -> Vec<u8> {
    let mut img = vec![0u8; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt();
            if d <= radius {
                img[r * cols + c] = (255.0 * (1.0 - d / radius)).max(1.0) as u8;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn produces_exactly_75_vertices_with_split() {
        let img = blob_image(28, 28, 13.5, 13.5, 9.0);
        let spg = build_superpixels(&img, 28, 28, 3, 50, 25, None, 11).unwrap();
        assert_eq!(spg.num_vertices(), 75);
        assert_eq!(spg.label, 3);
        assert_eq!(spg.values.len(), 75);
        // Foreground clusters come first and carry positive intensity.
        assert!(spg.values[..50].iter().all(|&v| v > 0.0));
        assert!(spg.values[50..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centroids_stay_inside_the_blob_bounding_box() {
        let img = blob_image(28, 28, 14.0, 10.0, 6.0);
        let spg = build_superpixels(&img, 28, 28, 0, 50, 25, None, 3).unwrap();
        for c in &spg.centroids[..50] {
            assert!(c[0] >= 8.0 - 1e-9 && c[0] <= 20.0 + 1e-9, "x = {}", c[0]);
            assert!(c[1] >= 4.0 - 1e-9 && c[1] <= 16.0 + 1e-9, "y = {}", c[1]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let img = blob_image(28, 28, 13.0, 13.0, 8.0);
        let a = build_superpixels(&img, 28, 28, 1, 50, 25, None, 99).unwrap();
        let b = build_superpixels(&img, 28, 28, 1, 50, 25, None, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_threshold_connects_the_graph() {
        let img = blob_image(28, 28, 13.0, 13.0, 8.0);
        let spg = build_superpixels(&img, 28, 28, 0, 50, 25, None, 5).unwrap();
        let (graph, _) = spg.to_graph_signal().unwrap();
        let d = graph.shortest_path_distances(0).unwrap();
        assert!(d.iter().all(|v| v.is_finite()), "graph is disconnected");
    }

    #[test]
    fn edges_symmetric_irreflexive() {
        let img = blob_image(28, 28, 13.0, 13.0, 8.0);
        let spg = build_superpixels(&img, 28, 28, 0, 50, 25, Some(6.0), 5).unwrap();
        for &(u, v) in &spg.edges {
            assert!(u < v);
        }
        let mut sorted = spg.edges.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), spg.edges.len());
    }

    #[test]
    fn coordinate_examples() {
        let spg = SuperpixelGraph {
            centroids: vec![[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]],
            values: vec![0.1, 0.2, 0.3],
            edges: vec![(0, 1)],
            label: 0,
        };
        let coords = superpixel_coords(&spg).unwrap();
        approx::assert_relative_eq!(coords.rho()[[0, 1]], 5.0, max_relative = 1e-15);
        match coords.angular() {
            AngularCoords::Angles(theta) => {
                approx::assert_relative_eq!(
                    theta[[0, 2]],
                    std::f64::consts::FRAC_PI_2,
                    max_relative = 1e-15
                );
            }
            _ => unreachable!(),
        }
        // Coincident centroids give rho = 0.
        let spg2 = SuperpixelGraph {
            centroids: vec![[1.0, 1.0], [1.0, 1.0]],
            values: vec![0.0, 0.0],
            edges: vec![],
            label: 0,
        };
        let coords2 = superpixel_coords(&spg2).unwrap();
        assert_eq!(coords2.rho()[[0, 1]], 0.0);
    }

    #[test]
    fn dataset_round_trip() {
        let img = blob_image(28, 28, 13.0, 13.0, 8.0);
        let items: Vec<SuperpixelGraph> = (0..3)
            .map(|i| build_superpixels(&img, 28, 28, i, 50, 25, None, i as u64).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_superpixel_dataset(&mut buf, &items, 10).unwrap();
        let (loaded, classes) = read_superpixel_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(classes, 10);
        assert_eq!(loaded.len(), 3);
        for (a, b) in items.iter().zip(&loaded) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.edges, b.edges);
            assert_eq!(a.centroids.len(), b.centroids.len());
            for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
                approx::assert_relative_eq!(ca[0], cb[0], max_relative = 1e-12);
                approx::assert_relative_eq!(ca[1], cb[1], max_relative = 1e-12);
            }
        }
    }
}
