//! Graphs, vertex signals, and shortest-path machinery.
//!
//! A [`Graph`] is an undirected weighted graph over `0..num_vertices`.
//! Distances follow the path-minimization metric: the length of a path is
//! the sum of its edge weights and `d(u,v)` is the minimum over all paths,
//! with unreachable pairs reported as `f64::INFINITY`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::VecDeque;
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::par::{par_collect, par_rows_mut};

/// Immutable undirected graph with nonnegative edge weights.
///
/// Edges are canonicalized to `u < v` on construction; self-loops and
/// duplicate edges are rejected so that iteration order and hashing are
/// reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_vertices: usize,
    edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<(usize, f64)>>,
    unit_weights: bool,
}

impl Graph {
    pub fn new(num_vertices: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        if num_vertices == 0 {
            return Err(Error::InvalidArgument("graph needs at least one vertex".into()));
        }
        let mut canonical: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len());
        for &(u, v, w) in edges {
            if u >= num_vertices || v >= num_vertices {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u},{v}) out of range for |V|={num_vertices}"
                )));
            }
            if u == v {
                return Err(Error::InvalidArgument(format!("self-loop at vertex {u}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u},{v}) has invalid weight {w}"
                )));
            }
            canonical.push((u.min(v), u.max(v), w));
        }
        canonical.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for pair in canonical.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(Error::InvalidArgument(format!(
                    "duplicate edge ({},{})",
                    pair[0].0, pair[0].1
                )));
            }
        }
        let mut adjacency = vec![Vec::new(); num_vertices];
        for &(u, v, w) in &canonical {
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
        let unit_weights = canonical.iter().all(|&(_, _, w)| w == 1.0);
        Ok(Graph {
            num_vertices,
            edges: canonical,
            adjacency,
            unit_weights,
        })
    }

    /// The standard image graph: `width x height` pixels with
    /// eight-neighbour connectivity and unit edge weights.
    pub fn image_grid(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be >= 1".into()));
        }
        let idx = |r: usize, c: usize| r * width + c;
        let mut edges = Vec::new();
        for r in 0..height {
            for c in 0..width {
                // Right, down, and the two diagonals; each edge added once.
                if c + 1 < width {
                    edges.push((idx(r, c), idx(r, c + 1), 1.0));
                }
                if r + 1 < height {
                    edges.push((idx(r, c), idx(r + 1, c), 1.0));
                    if c + 1 < width {
                        edges.push((idx(r, c), idx(r + 1, c + 1), 1.0));
                    }
                    if c > 0 {
                        edges.push((idx(r, c), idx(r + 1, c - 1), 1.0));
                    }
                }
            }
        }
        Graph::new(width * height, &edges)
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    /// Single-source shortest-path distances; unreachable vertices get
    /// `f64::INFINITY`. Dijkstra with a binary heap, or plain BFS when all
    /// weights are exactly 1.
    pub fn shortest_path_distances(&self, source: usize) -> Result<Vec<f64>> {
        if source >= self.num_vertices {
            return Err(Error::InvalidArgument(format!(
                "source {source} out of range for |V|={}",
                self.num_vertices
            )));
        }
        if self.unit_weights {
            return Ok(self.bfs_distances(source));
        }
        let mut dist = vec![f64::INFINITY; self.num_vertices];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry {
            dist: 0.0,
            vertex: source,
        });
        while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &(w, weight) in &self.adjacency[v] {
                let cand = d + weight;
                if cand < dist[w] {
                    dist[w] = cand;
                    heap.push(HeapEntry {
                        dist: cand,
                        vertex: w,
                    });
                }
            }
        }
        Ok(dist)
    }

    fn bfs_distances(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.num_vertices];
        dist[source] = 0.0;
        let mut queue = VecDeque::new();
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            for &(w, _) in &self.adjacency[v] {
                if dist[w].is_infinite() {
                    dist[w] = dist[v] + 1.0;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Full `|V| x |V|` distance matrix, computed per source row.
    pub fn all_pairs_distances(&self) -> Array2<f64> {
        let n = self.num_vertices;
        let mut out = Array2::<f64>::zeros((n, n));
        let data = out.as_slice_mut().expect("standard layout");
        par_rows_mut(data, n, |i, row| {
            let d = self
                .shortest_path_distances(i)
                .expect("source index in range");
            row.copy_from_slice(&d);
        });
        out
    }

    /// The n-neighborhood of `p`: all vertices within distance `n`
    /// (inclusive), always containing `p`. Returned sorted ascending.
    pub fn n_neighborhood(&self, p: usize, n: f64) -> Result<Vec<usize>> {
        let dist = self.shortest_path_distances(p)?;
        Ok((0..self.num_vertices).filter(|&v| dist[v] <= n).collect())
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, vertex index as a deterministic tiebreak.
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

/// A `|V| x d` real-valued signal on the vertices of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    values: Array2<f64>,
}

impl Signal {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument("signal must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("signal contains non-finite entries".into()));
        }
        Ok(Signal { values })
    }

    pub fn from_column(column: Vec<f64>) -> Result<Self> {
        let n = column.len();
        Signal::new(Array2::from_shape_vec((n, 1), column).expect("shape"))
    }

    pub fn num_vertices(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

/// A classification dataset: per-item graph, signal, and class label.
/// All graphs must share `|V|` and all signals must share `d`.
#[derive(Debug, Clone)]
pub struct LabeledGraphDataset {
    items: Vec<(Graph, Signal, usize)>,
    num_classes: usize,
}

impl LabeledGraphDataset {
    pub fn new(items: Vec<(Graph, Signal, usize)>, num_classes: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
        }
        let nv = items[0].0.num_vertices();
        let dim = items[0].1.dim();
        for (i, (g, s, label)) in items.iter().enumerate() {
            if g.num_vertices() != nv {
                return Err(Error::DimensionMismatch(format!(
                    "item {i} has |V|={}, expected {nv}",
                    g.num_vertices()
                )));
            }
            if s.num_vertices() != nv {
                return Err(Error::DimensionMismatch(format!(
                    "item {i} signal has {} rows, expected {nv}",
                    s.num_vertices()
                )));
            }
            if s.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "item {i} signal has d={}, expected {dim}",
                    s.dim()
                )));
            }
            if *label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "item {i} label {label} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(LabeledGraphDataset { items, num_classes })
    }

    pub fn items(&self) -> &[(Graph, Signal, usize)] {
        &self.items
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Writes the plain-text edge-list format: a `|V| |E| d` header line, then
/// `|E|` lines `u v w`, then `|V|` lines of `d` signal values.
pub fn write_graph_signal(w: &mut impl Write, graph: &Graph, signal: &Signal) -> Result<()> {
    if signal.num_vertices() != graph.num_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "signal rows {} != |V| {}",
            signal.num_vertices(),
            graph.num_vertices()
        )));
    }
    writeln!(
        w,
        "{} {} {}",
        graph.num_vertices(),
        graph.edges().len(),
        signal.dim()
    )?;
    for &(u, v, weight) in graph.edges() {
        writeln!(w, "{u} {v} {weight}")?;
    }
    for row in signal.values().rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads the edge-list format written by [`write_graph_signal`].
pub fn read_graph_signal(r: &mut impl BufRead) -> Result<(Graph, Signal)> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty edge-list input".into()))?;
    let header = header?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("line 1: bad header '{header}'")))?;
    if head.len() != 3 {
        return Err(Error::Format(format!(
            "line 1: header needs '|V| |E| d', got '{header}'"
        )));
    }
    let (nv, ne, dim) = (head[0], head[1], head[2]);
    let mut edges = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| Error::Format("unexpected end of edge block".into()))?;
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::Format(format!("line {}: expected 'u v w'", lineno + 1)));
        }
        let u: usize = toks[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad vertex", lineno + 1)))?;
        let v: usize = toks[1]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad vertex", lineno + 1)))?;
        let w: f64 = toks[2]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad weight", lineno + 1)))?;
        edges.push((u, v, w));
    }
    let mut values = Vec::with_capacity(nv * dim);
    for _ in 0..nv {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| Error::Format("unexpected end of signal block".into()))?;
        let line = line?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: bad signal value", lineno + 1)))?;
        if row.len() != dim {
            return Err(Error::Format(format!(
                "line {}: expected {dim} signal values, got {}",
                lineno + 1,
                row.len()
            )));
        }
        values.extend(row);
    }
    let graph = Graph::new(nv, &edges)?;
    let signal = Signal::new(Array2::from_shape_vec((nv, dim), values).expect("shape"))?;
    Ok((graph, signal))
}

/// All-source distances computed in parallel blocks; convenience wrapper
/// used where one row at a time is enough.
pub fn distance_rows(graph: &Graph, sources: &[usize]) -> Result<Vec<Vec<f64>>> {
    for &s in sources {
        if s >= graph.num_vertices() {
            return Err(Error::InvalidArgument(format!("source {s} out of range")));
        }
    }
    Ok(par_collect(sources.len(), |i| {
        graph
            .shortest_path_distances(sources[i])
            .expect("validated above")
    }))
}
