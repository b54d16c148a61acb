//! Convolution weighting functions and the pairwise weight tensor.
//!
//! A weight tensor stacks one `|V| x |V|` pairwise weight matrix per bin.
//! For the geodesic polar family a bin is an (angular, radial) pair laid out
//! radial-major, `b = k * J + j`; weights are the product of a radial and an
//! angular Gaussian factor. The MoNet family uses one Gaussian per bin over
//! two-dimensional pseudo-coordinates.

use std::f64::consts::TAU;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::par::par_collect;

/// Weights smaller than this are stored as exact zeros.
pub const WEIGHT_CUTOFF: f64 = 1e-12;

/// Geodesic polar weighting parameters (radial bin centers, angular bin
/// centers, and their Gaussian widths).
#[derive(Debug, Clone, PartialEq)]
pub struct PolarWeightParams {
    rho_centers: Vec<f64>,
    sigma_rho: f64,
    theta_centers: Vec<f64>,
    sigma_theta: f64,
    trainable_rho: Vec<bool>,
    trainable_sigma_rho: bool,
}

impl PolarWeightParams {
    pub fn new(
        rho_centers: Vec<f64>,
        sigma_rho: f64,
        theta_centers: Vec<f64>,
        sigma_theta: f64,
    ) -> Result<Self> {
        if rho_centers.is_empty() {
            return Err(Error::InvalidParameter("need K >= 1 radial bins".into()));
        }
        if theta_centers.is_empty() {
            return Err(Error::InvalidParameter("need J >= 1 angular bins".into()));
        }
        if !(sigma_rho > 0.0 && sigma_rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_rho must be > 0, got {sigma_rho}")));
        }
        if !(sigma_theta > 0.0 && sigma_theta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_theta must be > 0, got {sigma_theta}"
            )));
        }
        for pair in theta_centers.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidParameter(
                    "theta centers must be strictly increasing".into(),
                ));
            }
        }
        if theta_centers
            .iter()
            .any(|&t| !(0.0..TAU).contains(&t))
        {
            return Err(Error::InvalidParameter(
                "theta centers must lie in [0, 2*pi)".into(),
            ));
        }
        let k = rho_centers.len();
        Ok(PolarWeightParams {
            rho_centers,
            sigma_rho,
            theta_centers,
            sigma_theta,
            trainable_rho: vec![false; k],
            trainable_sigma_rho: false,
        })
    }

    /// Uniform angular bins `theta_j = 2*pi*j/J` with width `pi/J`; the
    /// paper fixes J and K but leaves the angular values open, so these are
    /// the library defaults.
    pub fn with_uniform_angles(
        num_angular: usize,
        rho_centers: Vec<f64>,
        sigma_rho: f64,
    ) -> Result<Self> {
        if num_angular == 0 {
            return Err(Error::InvalidParameter("need J >= 1 angular bins".into()));
        }
        let theta: Vec<f64> = (0..num_angular)
            .map(|j| TAU * j as f64 / num_angular as f64)
            .collect();
        let sigma_theta = std::f64::consts::PI / num_angular as f64;
        PolarWeightParams::new(rho_centers, sigma_rho, theta, sigma_theta)
    }

    pub fn set_trainable(&mut self, rho: &[bool], sigma_rho: bool) -> Result<()> {
        if rho.len() != self.rho_centers.len() {
            return Err(Error::DimensionMismatch(format!(
                "trainable mask has {} entries for {} radial bins",
                rho.len(),
                self.rho_centers.len()
            )));
        }
        self.trainable_rho = rho.to_vec();
        self.trainable_sigma_rho = sigma_rho;
        Ok(())
    }

    pub fn num_angular(&self) -> usize {
        self.theta_centers.len()
    }

    pub fn num_radial(&self) -> usize {
        self.rho_centers.len()
    }

    pub fn num_bins(&self) -> usize {
        self.num_angular() * self.num_radial()
    }

    pub fn rho_centers(&self) -> &[f64] {
        &self.rho_centers
    }

    pub fn sigma_rho(&self) -> f64 {
        self.sigma_rho
    }

    pub fn theta_centers(&self) -> &[f64] {
        &self.theta_centers
    }

    pub fn sigma_theta(&self) -> f64 {
        self.sigma_theta
    }

    pub fn trainable_rho(&self) -> &[bool] {
        &self.trainable_rho
    }

    pub fn trainable_sigma_rho(&self) -> bool {
        self.trainable_sigma_rho
    }

    pub(crate) fn set_rho_center(&mut self, k: usize, value: f64) {
        self.rho_centers[k] = value;
    }

    pub(crate) fn set_sigma_rho(&mut self, value: f64) {
        self.sigma_rho = value;
    }
}

/// MoNet-style Gaussian mixture weighting over 2-d pseudo-coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MoNetWeightParams {
    means: Vec<[f64; 2]>,
    covariances: Vec<[[f64; 2]; 2]>,
    inverses: Vec<[[f64; 2]; 2]>,
}

impl MoNetWeightParams {
    pub fn new(means: Vec<[f64; 2]>, covariances: Vec<[[f64; 2]; 2]>) -> Result<Self> {
        if means.is_empty() || means.len() != covariances.len() {
            return Err(Error::InvalidParameter(
                "need matching, non-empty mean and covariance lists".into(),
            ));
        }
        let mut inverses = Vec::with_capacity(covariances.len());
        for (j, c) in covariances.iter().enumerate() {
            let a = c[0][0];
            let b = 0.5 * (c[0][1] + c[1][0]);
            let d = c[1][1];
            let det = a * d - b * b;
            // 2x2 positive definiteness: positive leading minor and determinant.
            if !(a > 0.0 && det > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "covariance {j} is not positive definite"
                )));
            }
            inverses.push([[d / det, -b / det], [-b / det, a / det]]);
        }
        Ok(MoNetWeightParams {
            means,
            covariances,
            inverses,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[[f64; 2]] {
        &self.means
    }

    pub fn covariances(&self) -> &[[[f64; 2]; 2]] {
        &self.covariances
    }
}

/// Angular coordinates come in two flavors: a closed-form angle matrix
/// (images, superpixel centroids) or one distance table per angular bin
/// (mesh geodesic rays).
#[derive(Debug, Clone)]
pub enum AngularCoords {
    /// `theta[i, v]` in `[0, 2*pi)`; the residual against each bin center is
    /// wrapped around the circle.
    Angles(Array2<f64>),
    /// `tables[j, i, v] >= 0`: angular distance of `v` from bin `j`'s
    /// direction as seen from `i`; used directly as the Gaussian residual.
    PerBin(Array3<f64>),
}

/// Per-pair radial and angular coordinates for one domain.
#[derive(Debug, Clone)]
pub struct PairCoordinates {
    rho: Array2<f64>,
    angular: AngularCoords,
}

impl PairCoordinates {
    pub fn new(rho: Array2<f64>, angular: AngularCoords) -> Result<Self> {
        let n = rho.nrows();
        if rho.ncols() != n {
            return Err(Error::DimensionMismatch("rho matrix must be square".into()));
        }
        let scale = rho.iter().cloned().filter(|x| x.is_finite()).fold(0.0, f64::max);
        let tol = 1e-9 * scale.max(1.0);
        for i in 0..n {
            if rho[[i, i]].abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "rho diagonal entry {i} is {}, expected 0",
                    rho[[i, i]]
                )));
            }
            for v in 0..i {
                let a = rho[[i, v]];
                let b = rho[[v, i]];
                match (a.is_finite(), b.is_finite()) {
                    (true, true) => {
                        if (a - b).abs() > tol {
                            return Err(Error::InvalidArgument(format!(
                                "rho not symmetric at ({i},{v}): {a} vs {b}"
                            )));
                        }
                    }
                    (false, false) => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "rho not symmetric at ({i},{v}): finite vs infinite"
                        )))
                    }
                }
            }
        }
        match &angular {
            AngularCoords::Angles(theta) => {
                if theta.shape() != rho.shape() {
                    return Err(Error::DimensionMismatch(
                        "angle matrix shape must match rho".into(),
                    ));
                }
            }
            AngularCoords::PerBin(tables) => {
                if tables.shape()[1] != n || tables.shape()[2] != n {
                    return Err(Error::DimensionMismatch(
                        "per-bin angular tables must be J x |V| x |V|".into(),
                    ));
                }
            }
        }
        Ok(PairCoordinates { rho, angular })
    }

    pub fn num_vertices(&self) -> usize {
        self.rho.nrows()
    }

    pub fn rho(&self) -> &Array2<f64> {
        &self.rho
    }

    pub fn angular(&self) -> &AngularCoords {
        &self.angular
    }

    /// Number of angular tables, if the domain carries per-bin tables.
    pub fn per_bin_count(&self) -> Option<usize> {
        match &self.angular {
            AngularCoords::Angles(_) => None,
            AngularCoords::PerBin(t) => Some(t.shape()[0]),
        }
    }

    /// The angular Gaussian residual for pair `(i, v)` and bin `j`.
    fn angular_residual(&self, i: usize, v: usize, theta_center: f64, j: usize) -> f64 {
        match &self.angular {
            AngularCoords::Angles(theta) => wrap_angular_residual(theta[[i, v]], theta_center),
            AngularCoords::PerBin(tables) => tables[[j, i, v]],
        }
    }
}

/// Wrapped circular residual `min(|a-b|, 2*pi - |a-b|)`.
pub fn wrap_angular_residual(theta: f64, center: f64) -> f64 {
    let diff = (theta - center).abs() % TAU;
    diff.min(TAU - diff)
}

/// The geodesic polar weight of Eq.-7 form: a radial Gaussian around
/// `rho_k` times an angular Gaussian over the (already wrapped) residual.
/// Infinite radial distance (unreachable pair) maps to weight 0.
pub fn polar_weight(
    rho_val: f64,
    theta_dist: f64,
    j: usize,
    k: usize,
    params: &PolarWeightParams,
) -> f64 {
    debug_assert!(j < params.num_angular() && k < params.num_radial());
    if !rho_val.is_finite() {
        return 0.0;
    }
    let dr = rho_val - params.rho_centers[k];
    let radial = (-dr * dr / (2.0 * params.sigma_rho * params.sigma_rho)).exp();
    // At the center vertex the angle is undefined; the angular factor is 1
    // there so the center contributes through the radial bins only.
    let angular = if rho_val == 0.0 {
        1.0
    } else {
        (-theta_dist * theta_dist / (2.0 * params.sigma_theta * params.sigma_theta)).exp()
    };
    radial * angular
}

/// MoNet Gaussian weight for bin `j` at pseudo-coordinate `u_xy`.
pub fn monet_weight(u_xy: [f64; 2], j: usize, params: &MoNetWeightParams) -> f64 {
    let mu = params.means[j];
    let inv = params.inverses[j];
    let d = [u_xy[0] - mu[0], u_xy[1] - mu[1]];
    let quad = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1])
        + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    (-0.5 * quad).exp()
}

/// Degree pseudo-coordinates `(1/sqrt(deg x), 1/sqrt(deg y))`.
pub fn degree_pseudo_coords(g: &Graph, x: usize, y: usize) -> Result<[f64; 2]> {
    if x >= g.num_vertices() || y >= g.num_vertices() {
        return Err(Error::InvalidArgument("vertex index out of range".into()));
    }
    let dx = g.degree(x);
    let dy = g.degree(y);
    if dx == 0 || dy == 0 {
        return Err(Error::InvalidArgument(format!(
            "degree pseudo-coordinates undefined for isolated vertex ({})",
            if dx == 0 { x } else { y }
        )));
    }
    Ok([1.0 / (dx as f64).sqrt(), 1.0 / (dy as f64).sqrt()])
}

/// Pairwise pseudo-coordinates for a whole graph.
#[derive(Debug, Clone)]
pub struct PseudoCoordinates {
    /// `coords[[i, v]]` = u(i, v); stored as two stacked matrices.
    inv_sqrt_deg: Vec<f64>,
}

impl PseudoCoordinates {
    pub fn from_graph(g: &Graph) -> Result<Self> {
        let inv_sqrt_deg: Result<Vec<f64>> = (0..g.num_vertices())
            .map(|v| {
                let d = g.degree(v);
                if d == 0 {
                    Err(Error::InvalidArgument(format!(
                        "degree pseudo-coordinates undefined for isolated vertex ({v})"
                    )))
                } else {
                    Ok(1.0 / (d as f64).sqrt())
                }
            })
            .collect();
        Ok(PseudoCoordinates {
            inv_sqrt_deg: inv_sqrt_deg?,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.inv_sqrt_deg.len()
    }

    pub fn pair(&self, i: usize, v: usize) -> [f64; 2] {
        [self.inv_sqrt_deg[i], self.inv_sqrt_deg[v]]
    }
}

/// How bins of a weight tensor are indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinLayout {
    /// Geodesic polar bins, radial-major: `b = k * J + j`.
    PolarRadialMajor { num_angular: usize, num_radial: usize },
    /// MoNet Gaussians, one bin per mixture component.
    MoNet { num_bins: usize },
    /// `m x m` pixel offsets in image row-major order.
    BoxOffsets { m: usize },
}

impl BinLayout {
    pub fn num_bins(&self) -> usize {
        match *self {
            BinLayout::PolarRadialMajor {
                num_angular,
                num_radial,
            } => num_angular * num_radial,
            BinLayout::MoNet { num_bins } => num_bins,
            BinLayout::BoxOffsets { m } => m * m,
        }
    }

    pub fn tag(&self) -> String {
        match *self {
            BinLayout::PolarRadialMajor {
                num_angular,
                num_radial,
            } => format!("polar-radial-major:J={num_angular},K={num_radial}"),
            BinLayout::MoNet { num_bins } => format!("monet:J={num_bins}"),
            BinLayout::BoxOffsets { m } => format!("box-offsets:m={m}"),
        }
    }
}

/// One sparse pairwise weight matrix (compressed rows).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseWeights {
    pub fn from_rows(nrows: usize, ncols: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        assert_eq!(rows.len(), nrows);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        SparseWeights {
            nrows,
            ncols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, v: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.cols[lo..hi].binary_search(&(v as u32)) {
            Ok(pos) => self.vals[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.cols[lo..hi]
            .iter()
            .zip(&self.vals[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// Row sums, used by tests of the normalization mode.
    #[cfg(test)]
    fn row_sum(&self, i: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.vals[lo..hi].iter().sum()
    }
}

/// The stacked pairwise weight tensor: `num_bins` sparse `|V| x |V|`
/// matrices. Entries below [`WEIGHT_CUTOFF`] are exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    layout: BinLayout,
    num_vertices: usize,
    bins: Vec<SparseWeights>,
}

impl WeightTensor {
    pub fn from_bins(layout: BinLayout, num_vertices: usize, bins: Vec<SparseWeights>) -> Result<Self> {
        if bins.len() != layout.num_bins() {
            return Err(Error::DimensionMismatch(format!(
                "layout expects {} bins, got {}",
                layout.num_bins(),
                bins.len()
            )));
        }
        for b in &bins {
            if b.nrows() != num_vertices || b.ncols() != num_vertices {
                return Err(Error::DimensionMismatch(
                    "weight matrices must be |V| x |V|".into(),
                ));
            }
        }
        Ok(WeightTensor {
            layout,
            num_vertices,
            bins,
        })
    }

    pub fn layout(&self) -> BinLayout {
        self.layout
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn get(&self, b: usize, i: usize, v: usize) -> f64 {
        self.bins[b].get(i, v)
    }

    pub fn bin(&self, b: usize) -> &SparseWeights {
        &self.bins[b]
    }

    pub fn nnz(&self) -> usize {
        self.bins.iter().map(SparseWeights::nnz).sum()
    }

    /// Dense `(b, i, v)` row-major copy; used by the cache writer and tests.
    pub fn to_dense(&self) -> Array3<f64> {
        let n = self.num_vertices;
        let mut out = Array3::<f64>::zeros((self.num_bins(), n, n));
        for (b, bin) in self.bins.iter().enumerate() {
            for i in 0..n {
                for (v, w) in bin.row(i) {
                    out[[b, i, v]] = w;
                }
            }
        }
        out
    }

    pub fn from_dense(layout: BinLayout, dense: &Array3<f64>) -> Result<Self> {
        let n = dense.shape()[1];
        if dense.shape()[0] != layout.num_bins() || dense.shape()[2] != n {
            return Err(Error::DimensionMismatch(
                "dense tensor shape does not match layout".into(),
            ));
        }
        let bins = (0..layout.num_bins())
            .map(|b| {
                let rows: Vec<Vec<(u32, f64)>> = (0..n)
                    .map(|i| {
                        (0..n)
                            .filter_map(|v| {
                                let w = dense[[b, i, v]];
                                (w != 0.0).then_some((v as u32, w))
                            })
                            .collect()
                    })
                    .collect();
                SparseWeights::from_rows(n, n, rows)
            })
            .collect();
        WeightTensor::from_bins(layout, n, bins)
    }
}

/// Options for weight tensor construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightOptions {
    /// Normalize each `(b, i)` row to sum to 1 (off by default; the model
    /// definition does not normalize).
    pub normalize_rows: bool,
}

/// Builds the geodesic polar weight tensor `U[b=k*J+j, i, v]` from pair
/// coordinates. Deterministic given its inputs; parallel over bins.
pub fn build_weight_tensor(
    coords: &PairCoordinates,
    params: &PolarWeightParams,
    opts: WeightOptions,
) -> Result<WeightTensor> {
    if let Some(jt) = coords.per_bin_count() {
        if jt != params.num_angular() {
            return Err(Error::DimensionMismatch(format!(
                "coords carry {jt} angular tables but params declare J={}",
                params.num_angular()
            )));
        }
    }
    let n = coords.num_vertices();
    let j_bins = params.num_angular();
    let k_bins = params.num_radial();
    let layout = BinLayout::PolarRadialMajor {
        num_angular: j_bins,
        num_radial: k_bins,
    };
    let bins = par_collect(j_bins * k_bins, |b| {
        let j = b % j_bins;
        let k = b / j_bins;
        let theta_center = params.theta_centers()[j];
        let rows: Vec<Vec<(u32, f64)>> = (0..n)
            .map(|i| {
                let mut row: Vec<(u32, f64)> = (0..n)
                    .filter_map(|v| {
                        let rho = coords.rho[[i, v]];
                        let residual = coords.angular_residual(i, v, theta_center, j);
                        let w = polar_weight(rho, residual, j, k, params);
                        (w >= WEIGHT_CUTOFF).then_some((v as u32, w))
                    })
                    .collect();
                if opts.normalize_rows {
                    let total: f64 = row.iter().map(|&(_, w)| w).sum();
                    if total > 0.0 {
                        for entry in &mut row {
                            entry.1 /= total;
                        }
                    }
                }
                row
            })
            .collect();
        SparseWeights::from_rows(n, n, rows)
    });
    WeightTensor::from_bins(layout, n, bins)
}

/// The weight tensor together with its derivatives with respect to the
/// trainable radial parameters, sharing one sparsity pattern.
pub struct WeightTensorGrads {
    pub value: WeightTensor,
    /// `d U / d rho_k` for each trainable radial center, keyed by `k`.
    pub d_rho: Vec<(usize, WeightTensor)>,
    /// `d U / d log(sigma_rho)` when trainable.
    pub d_log_sigma_rho: Option<WeightTensor>,
}

/// Builds the tensor and the derivative tensors needed for hyperparameter
/// learning. Derivatives share the support of the value tensor: an entry
/// clamped to zero contributes no gradient.
pub fn build_weight_tensor_with_grads(
    coords: &PairCoordinates,
    params: &PolarWeightParams,
    opts: WeightOptions,
) -> Result<WeightTensorGrads> {
    if opts.normalize_rows {
        return Err(Error::Unsupported(
            "gradients of row-normalized weights are not implemented".into(),
        ));
    }
    let value = build_weight_tensor(coords, params, opts)?;
    let n = coords.num_vertices();
    let j_bins = params.num_angular();
    let sig2 = params.sigma_rho() * params.sigma_rho();
    let derive = |factor: &dyn Fn(f64, usize) -> f64| -> WeightTensor {
        let bins: Vec<SparseWeights> = value
            .bins
            .iter()
            .enumerate()
            .map(|(b, bin)| {
                let k = b / j_bins;
                let rows: Vec<Vec<(u32, f64)>> = (0..n)
                    .map(|i| {
                        bin.row(i)
                            .map(|(v, w)| {
                                let rho = coords.rho[[i, v]];
                                (v as u32, w * factor(rho, k))
                            })
                            .collect()
                    })
                    .collect();
                SparseWeights::from_rows(n, n, rows)
            })
            .collect();
        WeightTensor::from_bins(value.layout, n, bins).expect("same shape as value")
    };
    let mut d_rho = Vec::new();
    for (k, &trainable) in params.trainable_rho().iter().enumerate() {
        if trainable {
            let rho_k = params.rho_centers()[k];
            // dU/drho_k = U * (rho - rho_k) / sigma^2, zero for other radial bins.
            let tensor = derive(&|rho: f64, bin_k: usize| {
                if bin_k == k {
                    (rho - rho_k) / sig2
                } else {
                    0.0
                }
            });
            d_rho.push((k, tensor));
        }
    }
    let d_log_sigma_rho = params.trainable_sigma_rho().then(|| {
        // dU/dlog(sigma) = U * (rho - rho_k)^2 / sigma^2.
        let centers = params.rho_centers().to_vec();
        derive(&move |rho: f64, bin_k: usize| {
            let dr = rho - centers[bin_k];
            dr * dr / sig2
        })
    });
    Ok(WeightTensorGrads {
        value,
        d_rho,
        d_log_sigma_rho,
    })
}

/// Builds the MoNet weight tensor (one bin per mixture component) from
/// degree pseudo-coordinates.
pub fn build_monet_weight_tensor(
    coords: &PseudoCoordinates,
    params: &MoNetWeightParams,
) -> Result<WeightTensor> {
    let n = coords.num_vertices();
    let layout = BinLayout::MoNet {
        num_bins: params.num_bins(),
    };
    let bins = par_collect(params.num_bins(), |j| {
        let rows: Vec<Vec<(u32, f64)>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|v| {
                        let w = monet_weight(coords.pair(i, v), j, params);
                        (w >= WEIGHT_CUTOFF).then_some((v as u32, w))
                    })
                    .collect()
            })
            .collect();
        SparseWeights::from_rows(n, n, rows)
    });
    WeightTensor::from_bins(layout, n, bins)
}

/// Pair coordinates for a `width x height` image grid: `rho` is the
/// eight-neighbour graph distance and `theta` the angle of the displacement,
/// measured with "up" positive (`atan2(row_i - row_v, col_v - col_i)`)
/// and normalized to `[0, 2*pi)`.
pub fn image_grid_coords(width: usize, height: usize) -> Result<PairCoordinates> {
    let graph = Graph::image_grid(width, height)?;
    let rho = graph.all_pairs_distances();
    let n = width * height;
    let mut theta = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (ri, ci) = (i / width, i % width);
        for v in 0..n {
            let (rv, cv) = (v / width, v % width);
            if i == v {
                continue; // angle undefined at the center; weight code uses the rho=0 convention
            }
            let dy = ri as f64 - rv as f64; // row indices grow downward
            let dx = cv as f64 - ci as f64;
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
    PairCoordinates::new(rho, AngularCoords::Angles(theta))
}
