//! Sparse variational GP classification over the graph convolutional kernel.
//!
//! Inducing points live in patch space (inter-domain construction), so the
//! posterior over the patch response function costs `O(N M^2)` per step.
//! The variational distribution is whitened: `q` is placed over
//! `v = L^{-1} u` with `K_uu = L L^T`, so the prior corresponds to zero mean
//! and identity covariance and `KL(q || p)` has a closed form independent of
//! the kernel.
//!
//! `C` independent latent processes share one kernel; the classification
//! likelihood is a softmax with a Monte Carlo expectation whose noise is
//! redrawn deterministically per optimizer step. A Gaussian likelihood
//! variant backs the regression-style oracle checks.

mod elbo;
mod fit;

pub use elbo::{elbo, elbo_grad, pack_unconstrained, unpack_unconstrained, ElboGrad};
pub use fit::{fit, init_inducing, init_model, InducingInit, TrainConfig, TrainTrace};

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cache::{self, Header};
use crate::error::{Error, Result};
use crate::graph::Signal;
use crate::kernel::{GraphConvKernel, HyperparameterVector, Lengthscales, RbfKernel};
use crate::linalg;
use crate::patch::{build_patch_matrix_streaming, PatchMatrix};
use crate::rng::step_rng;
use crate::weighting::{PairCoordinates, PolarWeightParams, WeightOptions};

/// Observation likelihood.
#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    /// Softmax over `num_classes` latents, expectation estimated with
    /// `mc_samples` Monte Carlo draws (fixed per step).
    SoftmaxMc {
        num_classes: usize,
        mc_samples: usize,
    },
    /// Gaussian observation noise on a single latent; used by the
    /// regression variant and the ELBO bound checks.
    Gaussian { noise_variance: f64 },
}

impl Likelihood {
    pub fn num_latents(&self) -> usize {
        match self {
            Likelihood::SoftmaxMc { num_classes, .. } => *num_classes,
            Likelihood::Gaussian { .. } => 1,
        }
    }
}

/// A training target: a class index or a real-valued observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// One observation: a signal on a domain identified by `coords_idx`.
#[derive(Debug, Clone)]
pub struct PatchItem {
    pub signal: Signal,
    pub coords_idx: usize,
    pub target: Target,
}

/// A dataset prepared for patch-based training. Domains (pair coordinate
/// tables) are shared between items where possible — every MNIST image
/// lives on the same grid, while every superpixel graph or mesh brings its
/// own table.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    coords: Vec<Arc<PairCoordinates>>,
    items: Vec<PatchItem>,
    num_classes: usize,
    signal_dim: usize,
}

impl PatchDataset {
    pub fn new(
        coords: Vec<Arc<PairCoordinates>>,
        items: Vec<PatchItem>,
        num_classes: usize,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let signal_dim = items[0].signal.dim();
        for (i, item) in items.iter().enumerate() {
            let c = coords.get(item.coords_idx).ok_or_else(|| {
                Error::InvalidArgument(format!("item {i} references missing coords"))
            })?;
            if item.signal.num_vertices() != c.num_vertices() {
                return Err(Error::DimensionMismatch(format!(
                    "item {i}: signal has {} rows, coords expect {}",
                    item.signal.num_vertices(),
                    c.num_vertices()
                )));
            }
            if item.signal.dim() != signal_dim {
                return Err(Error::DimensionMismatch(format!(
                    "item {i}: signal dimension {} != {signal_dim}",
                    item.signal.dim()
                )));
            }
            if let Target::Class(label) = item.target {
                if label >= num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "item {i}: label {label} out of range"
                    )));
                }
            }
        }
        Ok(PatchDataset {
            coords,
            items,
            num_classes,
            signal_dim,
        })
    }

    /// All items share one coordinate table (e.g. the MNIST grid).
    pub fn shared_coords(
        coords: PairCoordinates,
        items: Vec<(Signal, Target)>,
        num_classes: usize,
    ) -> Result<Self> {
        let coords = vec![Arc::new(coords)];
        let items = items
            .into_iter()
            .map(|(signal, target)| PatchItem {
                signal,
                coords_idx: 0,
                target,
            })
            .collect();
        PatchDataset::new(coords, items, num_classes)
    }

    /// Scalar observations on single-vertex domains: each item's patch is
    /// just the weighted signal value. Backs the tiny regression problems
    /// used by the bound checks.
    pub fn single_vertex(values: &[f64], targets: Vec<Target>, num_classes: usize) -> Result<Self> {
        use ndarray::arr2;
        let coords = PairCoordinates::new(
            arr2(&[[0.0]]),
            crate::weighting::AngularCoords::Angles(arr2(&[[0.0]])),
        )?;
        let items = values
            .iter()
            .zip(targets)
            .map(|(&v, t)| Ok((Signal::from_column(vec![v])?, t)))
            .collect::<Result<Vec<_>>>()?;
        PatchDataset::shared_coords(coords, items, num_classes)
    }

    /// Every item brings its own coordinate table.
    pub fn per_item_coords(
        items: Vec<(PairCoordinates, Signal, Target)>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut coords = Vec::with_capacity(items.len());
        let mut out = Vec::with_capacity(items.len());
        for (idx, (c, signal, target)) in items.into_iter().enumerate() {
            coords.push(Arc::new(c));
            out.push(PatchItem {
                signal,
                coords_idx: idx,
                target,
            });
        }
        PatchDataset::new(coords, out, num_classes)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_dim
    }

    pub fn items(&self) -> &[PatchItem] {
        &self.items
    }

    pub fn coords(&self, idx: usize) -> &Arc<PairCoordinates> {
        &self.coords[idx]
    }

    /// Builds the patch matrix of one item under the given weighting.
    pub fn build_patches(
        &self,
        index: usize,
        weighting: &PolarWeightParams,
    ) -> Result<PatchMatrix> {
        let item = &self.items[index];
        build_patch_matrix_streaming(
            &item.signal,
            &self.coords[item.coords_idx],
            weighting,
            WeightOptions::default(),
        )
    }
}

/// The sparse variational model.
#[derive(Debug, Clone, PartialEq)]
pub struct GcgpModel {
    kernel: GraphConvKernel,
    inducing: Array2<f64>,
    q_mu: Array2<f64>,
    q_sqrt: Vec<Array2<f64>>,
    likelihood: Likelihood,
    seed: u64,
    step: u64,
}

impl GcgpModel {
    /// A fresh model with `q_mu = 0`, `q_sqrt = I` (the whitened prior).
    pub fn new(
        kernel: GraphConvKernel,
        inducing: Array2<f64>,
        likelihood: Likelihood,
        seed: u64,
    ) -> Result<Self> {
        let m = inducing.nrows();
        if m == 0 {
            return Err(Error::InvalidArgument("need M >= 1 inducing patches".into()));
        }
        if inducing.ncols() != kernel.patch_dim() {
            return Err(Error::DimensionMismatch(format!(
                "inducing patches have dimension {}, kernel expects {}",
                inducing.ncols(),
                kernel.patch_dim()
            )));
        }
        let c = likelihood.num_latents();
        let q_mu = Array2::zeros((m, c));
        let q_sqrt = (0..c).map(|_| Array2::eye(m)).collect();
        Ok(GcgpModel {
            kernel,
            inducing,
            q_mu,
            q_sqrt,
            likelihood,
            seed,
            step: 0,
        })
    }

    pub fn with_variational(
        mut self,
        q_mu: Array2<f64>,
        q_sqrt: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let m = self.inducing.nrows();
        let c = self.likelihood.num_latents();
        if q_mu.shape() != [m, c] {
            return Err(Error::DimensionMismatch(format!(
                "q_mu must be {m}x{c}, got {:?}",
                q_mu.shape()
            )));
        }
        if q_sqrt.len() != c {
            return Err(Error::DimensionMismatch(format!(
                "need {c} q_sqrt factors, got {}",
                q_sqrt.len()
            )));
        }
        for (ci, s) in q_sqrt.iter().enumerate() {
            if s.shape() != [m, m] {
                return Err(Error::DimensionMismatch(format!(
                    "q_sqrt[{ci}] must be {m}x{m}"
                )));
            }
            for i in 0..m {
                if s[[i, i]] <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "q_sqrt[{ci}] diagonal entry {i} must be positive"
                    )));
                }
                for j in (i + 1)..m {
                    if s[[i, j]] != 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "q_sqrt[{ci}] must be lower triangular"
                        )));
                    }
                }
            }
        }
        self.q_mu = q_mu;
        self.q_sqrt = q_sqrt;
        Ok(self)
    }

    pub fn kernel(&self) -> &GraphConvKernel {
        &self.kernel
    }

    pub fn inducing(&self) -> &Array2<f64> {
        &self.inducing
    }

    pub fn q_mu(&self) -> &Array2<f64> {
        &self.q_mu
    }

    pub fn q_sqrt(&self) -> &[Array2<f64>] {
        &self.q_sqrt
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn num_latents(&self) -> usize {
        self.likelihood.num_latents()
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// `KL(q(v) || N(0, I))` for the whitened parameterization: zero exactly
    /// when `q_mu = 0` and every factor is the identity.
    pub fn kl_divergence(&self) -> f64 {
        let m = self.num_inducing() as f64;
        let mut total = 0.0;
        for (c, s) in self.q_sqrt.iter().enumerate() {
            let mean_sq = self.q_mu.column(c).mapv(|v| v * v).sum();
            let mut frob = 0.0;
            let mut log_det = 0.0;
            for i in 0..s.nrows() {
                for j in 0..=i {
                    frob += s[[i, j]] * s[[i, j]];
                }
                log_det += s[[i, i]].ln();
            }
            total += 0.5 * (mean_sq + frob - m) - log_det;
        }
        total
    }
}

/// Per-class posterior moments and class probabilities for one input.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Softmax class probabilities (empty for the Gaussian likelihood).
    pub probabilities: Vec<f64>,
    pub latent_mean: Vec<f64>,
    pub latent_variance: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = c;
            }
        }
        best
    }
}

/// Posterior prediction for one signal given its patch matrix.
pub fn predict(model: &GcgpModel, z: &PatchMatrix) -> Result<Prediction> {
    let (mu, var) = elbo::latent_moments(model, std::slice::from_ref(z))?;
    let c = model.num_latents();
    let latent_mean: Vec<f64> = (0..c).map(|ci| mu[[0, ci]]).collect();
    let latent_variance: Vec<f64> = (0..c).map(|ci| var[[0, ci]].max(0.0)).collect();
    let probabilities = match model.likelihood() {
        Likelihood::Gaussian { .. } => Vec::new(),
        Likelihood::SoftmaxMc { mc_samples, .. } => {
            // MC average of softmax probabilities under q(f); deterministic
            // draws from the model's prediction stream.
            let mut rng = step_rng(model.seed, "predict", model.step);
            let samples = (*mc_samples).max(1);
            let mut probs = vec![0.0; c];
            let mut f = vec![0.0; c];
            for _ in 0..samples {
                for ci in 0..c {
                    let eps: f64 = rng.sample(StandardNormal);
                    f[ci] = latent_mean[ci] + latent_variance[ci].sqrt() * eps;
                }
                let mx = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = f.iter().map(|v| (v - mx).exp()).sum();
                for ci in 0..c {
                    probs[ci] += (f[ci] - mx).exp() / denom;
                }
            }
            for p in &mut probs {
                *p /= samples as f64;
            }
            probs
        }
    };
    Ok(Prediction {
        probabilities,
        latent_mean,
        latent_variance,
    })
}

/// Classification quality over a dataset: error rate plus the confusion
/// matrix (rows = true class, columns = predicted).
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub error_rate: f64,
    pub confusion: ndarray::Array2<usize>,
    pub num_items: usize,
}

/// Evaluates the classifier on every item of the dataset.
pub fn evaluate(model: &GcgpModel, dataset: &PatchDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let c = model.num_latents();
    if dataset.num_classes() != c {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} classes, model has {c} latents",
            dataset.num_classes()
        )));
    }
    let weighting = model.kernel().weighting().clone();
    let predictions = crate::par::par_collect(dataset.len(), |i| -> Result<(usize, usize)> {
        let z = dataset.build_patches(i, &weighting)?;
        let pred = predict(model, &z)?;
        let truth = match dataset.items()[i].target {
            Target::Class(y) => y,
            Target::Value(_) => {
                return Err(Error::InvalidArgument(
                    "evaluation needs class targets".into(),
                ))
            }
        };
        Ok((truth, pred.argmax()))
    });
    let mut confusion = ndarray::Array2::<usize>::zeros((c, c));
    let mut wrong = 0usize;
    for p in predictions {
        let (truth, guess) = p?;
        confusion[[truth, guess]] += 1;
        if truth != guess {
            wrong += 1;
        }
    }
    Ok(Evaluation {
        error_rate: wrong as f64 / dataset.len() as f64,
        confusion,
        num_items: dataset.len(),
    })
}

/// Convenience wrapper building the patch matrix from coordinates first.
pub fn predict_signal(
    model: &GcgpModel,
    signal: &Signal,
    coords: &PairCoordinates,
) -> Result<Prediction> {
    let z = build_patch_matrix_streaming(
        signal,
        coords,
        model.kernel().weighting(),
        WeightOptions::default(),
    )?;
    predict(model, &z)
}

/// Saves the model checkpoint (kernel configuration in the header, inducing
/// patches, variational parameters, and hyperparameters in the payload).
pub fn save_checkpoint(model: &GcgpModel, path: &Path) -> Result<()> {
    let m = model.num_inducing();
    let c = model.num_latents();
    let d = model.kernel().patch_dim();
    let mut header = Header::new();
    header
        .set("classes", c)
        .set("inducing", m)
        .set("patch_dim", d)
        .set("seed", model.seed)
        .set("step", model.step)
        .set("variance", model.kernel().base().variance());
    match model.kernel().base().lengthscales() {
        Lengthscales::Shared(l) => {
            header.set("lengthscales", "shared").set("lengthscale", l);
        }
        Lengthscales::PerDim(ls) => {
            header.set("lengthscales", "ard").set(
                "lengthscale",
                ls.iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
    }
    let w = model.kernel().weighting();
    header
        .set(
            "rho_centers",
            w.rho_centers()
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        )
        .set("sigma_rho", w.sigma_rho())
        .set(
            "theta_centers",
            w.theta_centers()
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        )
        .set("sigma_theta", w.sigma_theta())
        .set(
            "trainable_rho",
            w.trainable_rho()
                .iter()
                .map(|b| if *b { "1" } else { "0" })
                .collect::<Vec<_>>()
                .join(","),
        )
        .set("trainable_sigma_rho", if w.trainable_sigma_rho() { 1 } else { 0 });
    match model.likelihood() {
        Likelihood::SoftmaxMc { mc_samples, .. } => {
            header.set("likelihood", "softmax-mc").set("mc_samples", mc_samples);
        }
        Likelihood::Gaussian { noise_variance } => {
            header
                .set("likelihood", "gaussian")
                .set("noise_variance", noise_variance);
        }
    }
    // Payload: inducing (M x D), q_mu (M x C), q_sqrt (C dense M x M), and
    // the packed hyperparameter vector.
    let hv = HyperparameterVector::pack(model.kernel());
    let mut payload =
        Vec::with_capacity(m * d + m * c + c * m * m + hv.len());
    payload.extend(model.inducing().iter());
    payload.extend(model.q_mu().iter());
    for s in model.q_sqrt() {
        payload.extend(s.iter());
    }
    payload.extend(hv.values());
    header.set(
        "digest",
        cache::params_digest(&format!("model:{c}:{m}:{d}:{}", model.seed)),
    );
    cache::write_container(path, cache::MAGIC_MODEL, header, &payload)
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number '{t}' in checkpoint header")))
        })
        .collect()
}

/// Loads a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<GcgpModel> {
    let (header, payload) = cache::read_container(path, cache::MAGIC_MODEL)?;
    let c = header.require_usize("classes")?;
    let m = header.require_usize("inducing")?;
    let d = header.require_usize("patch_dim")?;
    let seed = header.require_usize("seed")? as u64;
    let step = header.require_usize("step")? as u64;
    let variance = header.require_f64("variance")?;
    let lengthscales = match header.require("lengthscales")? {
        "shared" => Lengthscales::Shared(header.require_f64("lengthscale")?),
        "ard" => Lengthscales::PerDim(parse_f64_list(header.require("lengthscale")?)?),
        other => {
            return Err(Error::Format(format!(
                "unknown lengthscale mode '{other}'"
            )))
        }
    };
    let rho_centers = parse_f64_list(header.require("rho_centers")?)?;
    let theta_centers = parse_f64_list(header.require("theta_centers")?)?;
    let mut weighting = PolarWeightParams::new(
        rho_centers,
        header.require_f64("sigma_rho")?,
        theta_centers,
        header.require_f64("sigma_theta")?,
    )?;
    let trainable_rho: Vec<bool> = header
        .require("trainable_rho")?
        .split(',')
        .map(|t| t == "1")
        .collect();
    weighting.set_trainable(
        &trainable_rho,
        header.require_usize("trainable_sigma_rho")? == 1,
    )?;
    let likelihood = match header.require("likelihood")? {
        "softmax-mc" => Likelihood::SoftmaxMc {
            num_classes: c,
            mc_samples: header.require_usize("mc_samples")?,
        },
        "gaussian" => Likelihood::Gaussian {
            noise_variance: header.require_f64("noise_variance")?,
        },
        other => return Err(Error::Format(format!("unknown likelihood '{other}'"))),
    };
    let kernel = GraphConvKernel::with_patch_dim(
        RbfKernel::new(variance, lengthscales)?,
        weighting,
        d,
    )?;
    let expected = m * d + m * c + c * m * m + HyperparameterVector::pack(&kernel).len();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint payload has {} values, expected {expected}",
            payload.len()
        )));
    }
    let mut offset = 0;
    let inducing =
        Array2::from_shape_vec((m, d), payload[offset..offset + m * d].to_vec()).expect("shape");
    offset += m * d;
    let q_mu =
        Array2::from_shape_vec((m, c), payload[offset..offset + m * c].to_vec()).expect("shape");
    offset += m * c;
    let mut q_sqrt = Vec::with_capacity(c);
    for _ in 0..c {
        q_sqrt.push(
            Array2::from_shape_vec((m, m), payload[offset..offset + m * m].to_vec())
                .expect("shape"),
        );
        offset += m * m;
    }
    let mut model = GcgpModel::new(kernel, inducing, likelihood, seed)?
        .with_variational(q_mu, q_sqrt)?;
    model.set_step(step);
    Ok(model)
}

/// Solves `L v = k_uf` columns for a batch; exposed for tests that need the
/// whitened projection directly.
pub(crate) fn whiten_cross_cov(l: &Array2<f64>, k_fu: &Array2<f64>) -> Array2<f64> {
    let b = k_fu.nrows();
    let m = k_fu.ncols();
    let mut a = Array2::<f64>::zeros((m, b));
    for n in 0..b {
        let col: Array1<f64> = k_fu.row(n).to_owned();
        a.column_mut(n)
            .assign(&linalg::solve_lower(l.view(), col.view()));
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weighting::image_grid_coords;
    use approx::assert_relative_eq;
    use rand::Rng;

    pub(crate) fn tiny_kernel(patch_dim: usize) -> GraphConvKernel {
        let base = RbfKernel::shared(1.0, 1.0).unwrap();
        let w = PolarWeightParams::with_uniform_angles(2, vec![0.0], 1.0).unwrap();
        GraphConvKernel::with_patch_dim(base, w, patch_dim).unwrap()
    }

    #[test]
    fn kl_zero_at_whitened_prior() {
        let kernel = tiny_kernel(2);
        let inducing = Array2::from_shape_vec((3, 2), vec![0.1; 6]).unwrap();
        let model = GcgpModel::new(
            kernel,
            inducing,
            Likelihood::SoftmaxMc {
                num_classes: 2,
                mc_samples: 4,
            },
            7,
        )
        .unwrap();
        assert_eq!(model.kl_divergence(), 0.0);
    }

    #[test]
    fn kl_positive_away_from_prior() {
        let kernel = tiny_kernel(2);
        let inducing = Array2::from_shape_vec((3, 2), vec![0.1; 6]).unwrap();
        let mut rng = crate::rng::subsystem_rng(31, "svgp-test");
        for _ in 0..20 {
            let q_mu = Array2::from_shape_fn((3, 1), |_| rng.random_range(-1.0..1.0));
            let mut s = Array2::<f64>::zeros((3, 3));
            for i in 0..3 {
                for j in 0..i {
                    s[[i, j]] = rng.random_range(-0.5..0.5);
                }
                s[[i, i]] = rng.random_range(0.2..2.0);
            }
            let model = GcgpModel::new(
                kernel.clone(),
                inducing.clone(),
                Likelihood::Gaussian {
                    noise_variance: 0.1,
                },
                7,
            )
            .unwrap()
            .with_variational(q_mu, vec![s])
            .unwrap();
            assert!(model.kl_divergence() >= 0.0);
        }
    }

    #[test]
    fn variational_validation() {
        let kernel = tiny_kernel(2);
        let inducing = Array2::from_shape_vec((2, 2), vec![0.0; 4]).unwrap();
        let model = GcgpModel::new(
            kernel,
            inducing,
            Likelihood::Gaussian {
                noise_variance: 0.1,
            },
            0,
        )
        .unwrap();
        // Negative diagonal rejected.
        let mut bad = Array2::eye(2);
        bad[[1, 1]] = -1.0;
        assert!(model
            .clone()
            .with_variational(Array2::zeros((2, 1)), vec![bad])
            .is_err());
        // Upper-triangular garbage rejected.
        let mut bad = Array2::eye(2);
        bad[[0, 1]] = 0.5;
        assert!(model
            .clone()
            .with_variational(Array2::zeros((2, 1)), vec![bad])
            .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut w = PolarWeightParams::with_uniform_angles(3, vec![0.0, 1.5], 0.8).unwrap();
        w.set_trainable(&[true, false], true).unwrap();
        let kernel =
            GraphConvKernel::new(RbfKernel::shared(1.4, 0.6).unwrap(), w, 1).unwrap();
        let mut rng = crate::rng::subsystem_rng(32, "svgp-test");
        let inducing = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let q_mu = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let q_sqrt: Vec<Array2<f64>> = (0..3)
            .map(|_| {
                let mut s = Array2::<f64>::zeros((4, 4));
                for i in 0..4 {
                    for j in 0..i {
                        s[[i, j]] = rng.random_range(-0.3..0.3);
                    }
                    s[[i, i]] = rng.random_range(0.5..1.5);
                }
                s
            })
            .collect();
        let mut model = GcgpModel::new(
            kernel,
            inducing,
            Likelihood::SoftmaxMc {
                num_classes: 3,
                mc_samples: 8,
            },
            42,
        )
        .unwrap()
        .with_variational(q_mu, q_sqrt)
        .unwrap();
        model.set_step(17);
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn untrained_prediction_near_uniform() {
        // q_mu = 0, q_sqrt = I: class probabilities should be within 0.05 of
        // uniform at >= 1000 MC samples.
        let coords = image_grid_coords(3, 3).unwrap();
        let weighting = PolarWeightParams::with_uniform_angles(2, vec![0.0, 1.0], 1.0).unwrap();
        let kernel = GraphConvKernel::new(
            RbfKernel::shared(1.0, 1.0).unwrap(),
            weighting.clone(),
            1,
        )
        .unwrap();
        let mut rng = crate::rng::subsystem_rng(33, "svgp-test");
        let inducing = Array2::from_shape_fn((5, kernel.patch_dim()), |_| {
            rng.random_range(-1.0..1.0)
        });
        let model = GcgpModel::new(
            kernel,
            inducing,
            Likelihood::SoftmaxMc {
                num_classes: 4,
                mc_samples: 2000,
            },
            3,
        )
        .unwrap();
        let signal = Signal::from_column((0..9).map(|i| i as f64 / 9.0).collect()).unwrap();
        let pred = predict_signal(&model, &signal, &coords).unwrap();
        let total: f64 = pred.probabilities.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
        for &p in &pred.probabilities {
            assert!((p - 0.25).abs() < 0.05, "probability {p} far from uniform");
        }
        for &v in &pred.latent_variance {
            assert!(v >= 0.0);
        }
    }
}
