//! Evidence lower bound and its analytic gradients.
//!
//! With whitened variational parameters `q(v_c) = N(m_c, S_c)`,
//! `S_c = Lq_c Lq_c^T` and `u = L v` for `K_uu = L L^T`, the batch bound is
//!
//! `ELBO = (N/B) * sum_n E_q[log p(y_n | f_n)] - KL(q || N(0, I))`
//!
//! where `f_n | v ~ N(a_n^T m, k_ff(n) - |a_n|^2 + |Lq^T a_n|^2)` and
//! `a_n = L^{-1} k_uf(., n)`. All gradients are closed-form: likelihood
//! adjoints flow through the posterior moments, the whitening solve, the
//! Cholesky pullback, the kernel, and (for trainable radial parameters)
//! the weight tensor into the patch matrices.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{
    self, accumulate_hyper_grad, patch_adjoint_left, HyperparameterVector, RbfHyperGrad,
};
use crate::linalg;
use crate::par::par_collect;
use crate::patch::{build_patch_matrix, PatchMatrix};
use crate::rng::step_rng;
use crate::weighting::{build_weight_tensor_with_grads, PolarWeightParams, WeightOptions};

use super::{GcgpModel, Likelihood, PatchDataset, Target};

/// Jitter escalation ladder (relative to the kernel variance). The first
/// level is already baked into `k_uu`.
const JITTER_LEVELS: [f64; 3] = [1e-6, 1e-5, 1e-4];

pub(crate) struct Moments {
    pub l: Array2<f64>,
    /// `M x B` whitened projections (one column per batch item).
    pub a: Array2<f64>,
    /// `B x C` posterior means.
    pub mu: Array2<f64>,
    /// `B x C` posterior variances.
    pub var: Array2<f64>,
    /// Per class `Lq_c^T A` (`M x B`).
    pub t: Vec<Array2<f64>>,
}

fn escalated_cholesky(model: &GcgpModel) -> Result<(Array2<f64>, f64)> {
    let k_uu = model.kernel().k_uu(model.inducing().view())?;
    let variance = model.kernel().base().variance();
    let mut last = None;
    for (attempt, level) in JITTER_LEVELS.iter().enumerate() {
        let mut padded = k_uu.clone();
        if attempt > 0 {
            let extra = (level - JITTER_LEVELS[0]) * variance;
            for i in 0..padded.nrows() {
                padded[[i, i]] += extra;
            }
        }
        match linalg::cholesky(padded.view()) {
            Ok(l) => return Ok((l, level * variance)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Numerical("cholesky failed".into())))
}

pub(crate) fn compute_moments(model: &GcgpModel, zs: &[&PatchMatrix]) -> Result<Moments> {
    let (l, _) = escalated_cholesky(model)?;
    let b = zs.len();
    let m = model.num_inducing();
    let c = model.num_latents();
    // K_fu rows and k_ff diagonals, one item at a time (parallel).
    let per_item: Vec<(Array1<f64>, f64)> = {
        let results = par_collect(b, |n| -> Result<(Array1<f64>, f64)> {
            let k_fu = model
                .kernel()
                .cross_cov_f_u(zs[n], model.inducing().view())?;
            let kff = model.kernel().conv_kernel(zs[n], zs[n])?;
            Ok((k_fu, kff))
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };
    let mut k_fu = Array2::<f64>::zeros((b, m));
    let mut kff = Vec::with_capacity(b);
    for (n, (row, diag)) in per_item.into_iter().enumerate() {
        k_fu.row_mut(n).assign(&row);
        kff.push(diag);
    }
    let a = super::whiten_cross_cov(&l, &k_fu);
    let mut mu = Array2::<f64>::zeros((b, c));
    let mut var = Array2::<f64>::zeros((b, c));
    let mut t = Vec::with_capacity(c);
    let a_sq: Vec<f64> = (0..b).map(|n| a.column(n).dot(&a.column(n))).collect();
    for ci in 0..c {
        let tc = model.q_sqrt()[ci].t().dot(&a); // M x B
        for n in 0..b {
            mu[[n, ci]] = a.column(n).dot(&model.q_mu().column(ci));
            let tn = tc.column(n).dot(&tc.column(n));
            var[[n, ci]] = kff[n] - a_sq[n] + tn;
        }
        t.push(tc);
    }
    Ok(Moments { l, a, mu, var, t })
}

/// Posterior latent moments for a set of patch matrices (used by predict).
pub(crate) fn latent_moments(
    model: &GcgpModel,
    zs: &[PatchMatrix],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let refs: Vec<&PatchMatrix> = zs.iter().collect();
    let m = compute_moments(model, &refs)?;
    Ok((m.mu, m.var))
}

/// Expected log likelihood per item with derivatives wrt posterior mean and
/// variance. The Monte Carlo noise is drawn from `rng` in a fixed order.
fn likelihood_expectations(
    likelihood: &Likelihood,
    targets: &[Target],
    mu: &Array2<f64>,
    var: &Array2<f64>,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
    let b = targets.len();
    let c = likelihood.num_latents();
    let mut e = vec![0.0; b];
    let mut gmu = Array2::<f64>::zeros((b, c));
    let mut gvar = Array2::<f64>::zeros((b, c));
    match likelihood {
        Likelihood::Gaussian { noise_variance } => {
            let s2 = *noise_variance;
            for n in 0..b {
                let y = match targets[n] {
                    Target::Value(v) => v,
                    Target::Class(_) => {
                        return Err(Error::InvalidArgument(
                            "gaussian likelihood needs real-valued targets".into(),
                        ))
                    }
                };
                let m = mu[[n, 0]];
                let v = var[[n, 0]].max(0.0);
                e[n] = -0.5 * (std::f64::consts::TAU * s2).ln()
                    - ((y - m) * (y - m) + v) / (2.0 * s2);
                gmu[[n, 0]] = (y - m) / s2;
                gvar[[n, 0]] = -0.5 / s2;
            }
        }
        Likelihood::SoftmaxMc { mc_samples, .. } => {
            let samples = (*mc_samples).max(1);
            let inv_s = 1.0 / samples as f64;
            let mut f = vec![0.0; c];
            let mut eps = vec![0.0; c];
            for n in 0..b {
                let y = match targets[n] {
                    Target::Class(label) => label,
                    Target::Value(_) => {
                        return Err(Error::InvalidArgument(
                            "softmax likelihood needs class targets".into(),
                        ))
                    }
                };
                let sigmas: Vec<f64> = (0..c).map(|ci| var[[n, ci]].max(0.0).sqrt()).collect();
                for _ in 0..samples {
                    for ci in 0..c {
                        let z: f64 = rng.sample(StandardNormal);
                        eps[ci] = z;
                        f[ci] = mu[[n, ci]] + sigmas[ci] * z;
                    }
                    let mx = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = f.iter().map(|v| (v - mx).exp()).sum();
                    let lse = mx + denom.ln();
                    e[n] += (f[y] - lse) * inv_s;
                    for ci in 0..c {
                        let p = (f[ci] - mx).exp() / denom;
                        let dll = (if ci == y { 1.0 } else { 0.0 }) - p;
                        gmu[[n, ci]] += dll * inv_s;
                        // Pathwise derivative wrt sigma, then to variance.
                        if sigmas[ci] > 0.0 {
                            gvar[[n, ci]] += dll * eps[ci] * inv_s / (2.0 * sigmas[ci]);
                        }
                    }
                }
            }
        }
    }
    Ok((e, gmu, gvar))
}

/// Batch patch matrices with the derivative patch matrices needed for
/// trainable radial parameters.
pub(crate) struct BatchPatches {
    pub z: Vec<PatchMatrix>,
    pub dz_rho: Vec<(usize, Vec<PatchMatrix>)>,
    pub dz_log_sigma: Option<Vec<PatchMatrix>>,
}

/// Builds patch matrices for the given items, grouping by shared coordinate
/// tables so each weight tensor is constructed once.
pub(crate) fn build_batch_patches(
    dataset: &PatchDataset,
    indices: &[usize],
    weighting: &PolarWeightParams,
    with_grads: bool,
) -> Result<BatchPatches> {
    let trainable =
        weighting.trainable_rho().iter().any(|&t| t) || weighting.trainable_sigma_rho();
    let need_grads = with_grads && trainable;
    let mut z: Vec<Option<PatchMatrix>> = vec![None; indices.len()];
    let trainable_ks: Vec<usize> = weighting
        .trainable_rho()
        .iter()
        .enumerate()
        .filter_map(|(k, &t)| t.then_some(k))
        .collect();
    let mut dz_rho: Vec<(usize, Vec<Option<PatchMatrix>>)> = trainable_ks
        .iter()
        .map(|&k| (k, vec![None; indices.len()]))
        .collect();
    let mut dz_log_sigma: Option<Vec<Option<PatchMatrix>>> =
        (need_grads && weighting.trainable_sigma_rho()).then(|| vec![None; indices.len()]);

    // Group batch positions by coordinate table.
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (pos, &idx) in indices.iter().enumerate() {
        groups
            .entry(dataset.items()[idx].coords_idx)
            .or_default()
            .push(pos);
    }
    for (coords_idx, positions) in groups {
        let coords = dataset.coords(coords_idx);
        if need_grads {
            let grads =
                build_weight_tensor_with_grads(coords, weighting, WeightOptions::default())?;
            for &pos in &positions {
                let signal = &dataset.items()[indices[pos]].signal;
                z[pos] = Some(build_patch_matrix(signal, &grads.value)?);
                for (slot, (_, du)) in dz_rho.iter_mut().zip(&grads.d_rho) {
                    slot.1[pos] = Some(build_patch_matrix(signal, du)?);
                }
                if let (Some(slots), Some(du)) =
                    (dz_log_sigma.as_mut(), grads.d_log_sigma_rho.as_ref())
                {
                    slots[pos] = Some(build_patch_matrix(signal, du)?);
                }
            }
        } else {
            // Streaming path is bitwise-equal to the two-step path and never
            // materializes U.
            for &pos in &positions {
                let item = &dataset.items()[indices[pos]];
                z[pos] = Some(crate::patch::build_patch_matrix_streaming(
                    &item.signal,
                    coords,
                    weighting,
                    WeightOptions::default(),
                )?);
            }
        }
    }
    Ok(BatchPatches {
        z: z.into_iter().map(|o| o.expect("filled")).collect(),
        dz_rho: dz_rho
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|o| o.expect("filled")).collect()))
            .collect(),
        dz_log_sigma: dz_log_sigma
            .map(|v| v.into_iter().map(|o| o.expect("filled")).collect()),
    })
}

/// Gradient of the ELBO over all trainable parameters, in unconstrained
/// space (the `q_sqrt` diagonal is parameterized by its logarithm).
#[derive(Debug, Clone)]
pub struct ElboGrad {
    pub d_q_mu: Array2<f64>,
    /// Lower-triangular gradients; diagonal entries already chained through
    /// the log parameterization.
    pub d_q_sqrt_raw: Vec<Array2<f64>>,
    pub d_inducing: Array2<f64>,
    /// Gradient over [`HyperparameterVector::pack`] order.
    pub d_hyper: Vec<f64>,
}

impl ElboGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.d_q_mu.iter().cloned().collect();
        for s in &self.d_q_sqrt_raw {
            for i in 0..s.nrows() {
                for j in 0..=i {
                    out.push(s[[i, j]]);
                }
            }
        }
        out.extend(self.d_inducing.iter());
        out.extend(&self.d_hyper);
        out
    }
}

/// Unconstrained parameter vector matching [`ElboGrad::flatten`]:
/// `q_mu` (row-major), per-class `q_sqrt` lower triangles with log diagonal,
/// inducing patches (row-major), then the hyperparameter vector.
pub fn pack_unconstrained(model: &GcgpModel) -> Vec<f64> {
    let mut out: Vec<f64> = model.q_mu().iter().cloned().collect();
    for s in model.q_sqrt() {
        for i in 0..s.nrows() {
            for j in 0..=i {
                out.push(if i == j { s[[i, j]].ln() } else { s[[i, j]] });
            }
        }
    }
    out.extend(model.inducing().iter());
    out.extend(HyperparameterVector::pack(model.kernel()).values());
    out
}

/// Rebuilds a model from the unconstrained vector, using `template` for
/// shapes, likelihood, seed, and step.
pub fn unpack_unconstrained(template: &GcgpModel, values: &[f64]) -> Result<GcgpModel> {
    let m = template.num_inducing();
    let c = template.num_latents();
    let d = template.kernel().patch_dim();
    let tri = m * (m + 1) / 2;
    let mut hv = HyperparameterVector::pack(template.kernel());
    let expected = m * c + c * tri + m * d + hv.len();
    if values.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} entries, expected {expected}",
            values.len()
        )));
    }
    let mut offset = 0;
    let q_mu = Array2::from_shape_vec((m, c), values[offset..offset + m * c].to_vec())
        .expect("shape");
    offset += m * c;
    let mut q_sqrt = Vec::with_capacity(c);
    for _ in 0..c {
        let mut s = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..=i {
                let v = values[offset];
                offset += 1;
                s[[i, j]] = if i == j { v.exp() } else { v };
            }
        }
        q_sqrt.push(s);
    }
    let inducing = Array2::from_shape_vec((m, d), values[offset..offset + m * d].to_vec())
        .expect("shape");
    offset += m * d;
    hv.set_values(&values[offset..])?;
    let kernel = hv.apply_to(template.kernel())?;
    let mut model = GcgpModel::new(kernel, inducing, template.likelihood().clone(), template.seed())?
        .with_variational(q_mu, q_sqrt)?;
    model.set_step(template.step());
    Ok(model)
}

/// The stochastic evidence lower bound on a batch, scaled to the full
/// dataset size. Deterministic given the model's seed and step.
pub fn elbo(
    model: &GcgpModel,
    dataset: &PatchDataset,
    indices: &[usize],
    total_n: usize,
) -> Result<f64> {
    let patches = build_batch_patches(
        dataset,
        indices,
        model.kernel().weighting(),
        false,
    )?;
    let targets: Vec<Target> = indices
        .iter()
        .map(|&i| dataset.items()[i].target)
        .collect();
    elbo_with_patches(model, &patches.z, &targets, total_n)
}

pub(crate) fn elbo_with_patches(
    model: &GcgpModel,
    zs: &[PatchMatrix],
    targets: &[Target],
    total_n: usize,
) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::InvalidArgument("batch is empty".into()));
    }
    let refs: Vec<&PatchMatrix> = zs.iter().collect();
    let moments = compute_moments(model, &refs)?;
    let mut rng = step_rng(model.seed(), "mc", model.step());
    let (e, _, _) = likelihood_expectations(
        model.likelihood(),
        targets,
        &moments.mu,
        &moments.var,
        &mut rng,
    )?;
    let scale = total_n as f64 / zs.len() as f64;
    Ok(scale * e.iter().sum::<f64>() - model.kl_divergence())
}

/// ELBO value and full gradient for a batch. `patches` must carry
/// derivative matrices when radial weighting parameters are trainable.
pub fn elbo_grad(
    model: &GcgpModel,
    dataset: &PatchDataset,
    indices: &[usize],
    total_n: usize,
) -> Result<(f64, ElboGrad)> {
    let patches = build_batch_patches(dataset, indices, model.kernel().weighting(), true)?;
    let targets: Vec<Target> = indices
        .iter()
        .map(|&i| dataset.items()[i].target)
        .collect();
    elbo_grad_with_patches(model, &patches, &targets, total_n)
}

pub(crate) fn elbo_grad_with_patches(
    model: &GcgpModel,
    patches: &BatchPatches,
    targets: &[Target],
    total_n: usize,
) -> Result<(f64, ElboGrad)> {
    let zs = &patches.z;
    if zs.is_empty() {
        return Err(Error::InvalidArgument("batch is empty".into()));
    }
    let b = zs.len();
    let m = model.num_inducing();
    let c = model.num_latents();
    let kernel = model.kernel();
    let inducing = model.inducing();
    let refs: Vec<&PatchMatrix> = zs.iter().collect();
    let moments = compute_moments(model, &refs)?;
    let mut rng = step_rng(model.seed(), "mc", model.step());
    let (e, gmu, gvar) = likelihood_expectations(
        model.likelihood(),
        targets,
        &moments.mu,
        &moments.var,
        &mut rng,
    )?;
    let scale = total_n as f64 / b as f64;
    let value = scale * e.iter().sum::<f64>() - model.kl_divergence();

    // --- Variational gradients ---------------------------------------
    let a = &moments.a; // M x B
    let mut d_q_mu = Array2::<f64>::zeros((m, c));
    for ci in 0..c {
        let g = gmu.column(ci).to_owned();
        let mut col = a.dot(&g);
        col.mapv_inplace(|v| v * scale);
        col -= &model.q_mu().column(ci);
        d_q_mu.column_mut(ci).assign(&col);
    }
    let mut d_q_sqrt_raw = Vec::with_capacity(c);
    for ci in 0..c {
        let lq = &model.q_sqrt()[ci];
        // P = A diag(gvar_c) A^T.
        let mut aw = a.clone();
        for (n, mut col) in aw.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * gvar[[n, ci]]);
        }
        let p = aw.dot(&a.t());
        let mut d = p.dot(lq);
        d.mapv_inplace(|v| v * 2.0 * scale);
        // KL part: d(-KL)/dLq = -(Lq - diag(1/Lq_ii)).
        for i in 0..m {
            for j in 0..=i {
                d[[i, j]] -= lq[[i, j]];
            }
            d[[i, i]] += 1.0 / lq[[i, i]];
        }
        // Zero the upper triangle and chain the diagonal through the log.
        for i in 0..m {
            for j in (i + 1)..m {
                d[[i, j]] = 0.0;
            }
            d[[i, i]] *= lq[[i, i]];
        }
        d_q_sqrt_raw.push(d);
    }

    // --- Adjoint of the whitened projection --------------------------
    // A_bar[:, n] = scale * sum_c ( gmu[n,c] m_c + gvar[n,c] * 2 (Lq_c t_c[:,n] - A[:,n]) ).
    let mut a_bar = model.q_mu().dot(&gmu.t()); // M x B
    for ci in 0..c {
        let st = model.q_sqrt()[ci].dot(&moments.t[ci]); // S_c A = Lq (Lq^T A)
        for n in 0..b {
            let g = gvar[[n, ci]];
            if g != 0.0 {
                let mut col = a_bar.column_mut(n);
                col.scaled_add(2.0 * g, &st.column(n));
                col.scaled_add(-2.0 * g, &a.column(n));
            }
        }
    }
    a_bar.mapv_inplace(|v| v * scale);

    // K_fu adjoint and Cholesky pullback.
    let linv_t_abar = linalg::solve_lower_transpose_multi(moments.l.view(), a_bar.view()); // M x B
    let k_fu_bar = linv_t_abar.t().to_owned(); // B x M
    let mut l_bar = linv_t_abar.dot(&a.t()); // M x M
    l_bar.mapv_inplace(|v| -v);
    for i in 0..m {
        for j in (i + 1)..m {
            l_bar[[i, j]] = 0.0;
        }
    }
    let k_uu_bar = linalg::cholesky_rev(moments.l.view(), l_bar.view());
    let kff_bar: Vec<f64> = (0..b)
        .map(|n| scale * (0..c).map(|ci| gvar[[n, ci]]).sum::<f64>())
        .collect();

    // --- Kernel-space gradients ---------------------------------------
    let mut hyper = RbfHyperGrad::zeros(kernel);
    let mut d_inducing = Array2::<f64>::zeros((m, kernel.patch_dim()));

    // K_uu contribution (jitter's variance dependence included).
    let (gram_uu, sq_uu) =
        kernel.cross_gram_with_sqdist(inducing.view(), inducing.view())?;
    accumulate_hyper_grad(
        kernel,
        inducing.view(),
        inducing.view(),
        k_uu_bar.view(),
        gram_uu.view(),
        sq_uu.view(),
        &mut hyper,
    );
    let jitter = kernel.jitter();
    let trace_bar: f64 = (0..m).map(|i| k_uu_bar[[i, i]]).sum();
    hyper.d_log_variance += jitter * trace_bar;
    let uu_adj = patch_adjoint_left(
        kernel,
        inducing.view(),
        inducing.view(),
        k_uu_bar.view(),
        gram_uu.view(),
    );
    d_inducing.scaled_add(2.0, &uu_adj);

    // Per-item contributions, computed in parallel and reduced in order.
    let want_zbar = !patches.dz_rho.is_empty() || patches.dz_log_sigma.is_some();
    struct ItemGrad {
        hyper: RbfHyperGrad,
        d_inducing: Array2<f64>,
        z_bar: Option<Array2<f64>>,
    }
    let items: Vec<Result<ItemGrad>> = par_collect(b, |n| -> Result<ItemGrad> {
        let z = &zs[n];
        let nv = z.num_vertices();
        let mut hyper = RbfHyperGrad::zeros(kernel);
        // Cross term K_fu[n, :]: weight w[i, m] = K_fu_bar[n, m].
        let (gram_n, sq_n) = kernel.cross_gram_with_sqdist(z.values(), inducing.view())?;
        let w_n = Array2::from_shape_fn((nv, m), |(_, mm)| k_fu_bar[[n, mm]]);
        accumulate_hyper_grad(
            kernel,
            z.values(),
            inducing.view(),
            w_n.view(),
            gram_n.view(),
            sq_n.view(),
            &mut hyper,
        );
        let d_ind = patch_adjoint_left(
            kernel,
            inducing.view(),
            z.values(),
            w_n.t().to_owned().view(),
            gram_n.t().to_owned().view(),
        );
        // k_ff(n) term.
        let (gram_nn, sq_nn) = kernel.cross_gram_with_sqdist(z.values(), z.values())?;
        let w_nn = Array2::from_elem((nv, nv), kff_bar[n]);
        accumulate_hyper_grad(
            kernel,
            z.values(),
            z.values(),
            w_nn.view(),
            gram_nn.view(),
            sq_nn.view(),
            &mut hyper,
        );
        let z_bar = want_zbar.then(|| {
            let mut zb = patch_adjoint_left(
                kernel,
                z.values(),
                inducing.view(),
                w_n.view(),
                gram_n.view(),
            );
            let self_adj = patch_adjoint_left(
                kernel,
                z.values(),
                z.values(),
                w_nn.view(),
                gram_nn.view(),
            );
            zb.scaled_add(2.0, &self_adj);
            zb
        });
        Ok(ItemGrad {
            hyper,
            d_inducing: d_ind,
            z_bar,
        })
    });
    let mut z_bars: Vec<Option<Array2<f64>>> = Vec::with_capacity(b);
    for item in items {
        let item = item?;
        hyper.add(&item.hyper);
        d_inducing += &item.d_inducing;
        z_bars.push(item.z_bar);
    }

    // --- Weighting-parameter gradients through Z ----------------------
    let mut d_rho: Vec<(usize, f64)> = Vec::new();
    for (k, dzs) in &patches.dz_rho {
        let mut g = 0.0;
        for n in 0..b {
            let zb = z_bars[n].as_ref().expect("requested");
            g += (zb * &dzs[n].values()).sum();
        }
        d_rho.push((*k, g));
    }
    let d_log_sigma = patches.dz_log_sigma.as_ref().map(|dzs| {
        let mut g = 0.0;
        for n in 0..b {
            let zb = z_bars[n].as_ref().expect("requested");
            g += (zb * &dzs[n].values()).sum();
        }
        g
    });
    let d_hyper = kernel::assemble_hyper_gradient(kernel, &hyper, &d_rho, d_log_sigma);

    Ok((
        value,
        ElboGrad {
            d_q_mu,
            d_q_sqrt_raw,
            d_inducing,
            d_hyper,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use crate::kernel::{GraphConvKernel, RbfKernel};
    
    use approx::assert_relative_eq;
    
    use rand::Rng;

    pub(crate) fn single_vertex_dataset(
        values: &[f64],
        targets: Vec<Target>,
        num_classes: usize,
    ) -> PatchDataset {
        PatchDataset::single_vertex(values, targets, num_classes).unwrap()
    }

    fn tiny_model(c: usize, m: usize, seed: u64, rng: &mut impl Rng) -> GcgpModel {
        let weighting =
            crate::weighting::PolarWeightParams::with_uniform_angles(2, vec![0.0], 1.0).unwrap();
        let kernel = GraphConvKernel::new(
            RbfKernel::shared(1.0 + rng.random_range(0.0..0.5), 0.8).unwrap(),
            weighting,
            1,
        )
        .unwrap();
        let inducing = Array2::from_shape_fn((m, kernel.patch_dim()), |_| {
            rng.random_range(-1.0..1.0)
        });
        let likelihood = if c == 1 {
            Likelihood::Gaussian {
                noise_variance: 0.1,
            }
        } else {
            Likelihood::SoftmaxMc {
                num_classes: c,
                mc_samples: 3,
            }
        };
        let q_mu = Array2::from_shape_fn((m, c), |_| rng.random_range(-0.5..0.5));
        let q_sqrt: Vec<Array2<f64>> = (0..c)
            .map(|_| {
                let mut s = Array2::<f64>::zeros((m, m));
                for i in 0..m {
                    for j in 0..i {
                        s[[i, j]] = rng.random_range(-0.3..0.3);
                    }
                    s[[i, i]] = rng.random_range(0.5..1.5);
                }
                s
            })
            .collect();
        GcgpModel::new(kernel, inducing, likelihood, seed)
            .unwrap()
            .with_variational(q_mu, q_sqrt)
            .unwrap()
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = crate::rng::subsystem_rng(40, "elbo-test");
        let model = tiny_model(3, 4, 9, &mut rng);
        let packed = pack_unconstrained(&model);
        let rebuilt = unpack_unconstrained(&model, &packed).unwrap();
        assert_eq!(model, rebuilt);
    }

    #[test]
    fn elbo_deterministic_given_seed_and_step() {
        let mut rng = crate::rng::subsystem_rng(41, "elbo-test");
        let model = tiny_model(3, 3, 11, &mut rng);
        let dataset = single_vertex_dataset(
            &[0.3, -0.8, 1.2, 0.1],
            vec![
                Target::Class(0),
                Target::Class(2),
                Target::Class(1),
                Target::Class(0),
            ],
            3,
        );
        let a = elbo(&model, &dataset, &[0, 1, 2, 3], 4).unwrap();
        let b = elbo(&model, &dataset, &[0, 1, 2, 3], 4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradient_matches_finite_differences_gaussian() {
        let mut rng = crate::rng::subsystem_rng(42, "elbo-test");
        let model = tiny_model(1, 3, 13, &mut rng);
        let dataset = single_vertex_dataset(
            &[0.3, -0.8, 1.2],
            vec![
                Target::Value(0.5),
                Target::Value(-0.2),
                Target::Value(1.0),
            ],
            1,
        );
        let indices = [0usize, 1, 2];
        let (_, grad) = elbo_grad(&model, &dataset, &indices, 3).unwrap();
        let flat = grad.flatten();
        let params = pack_unconstrained(&model);
        let h = 1e-5;
        for idx in 0..params.len() {
            let mut pp = params.clone();
            pp[idx] += h;
            let mut pm = params.clone();
            pm[idx] -= h;
            let mp = unpack_unconstrained(&model, &pp).unwrap();
            let mm = unpack_unconstrained(&model, &pm).unwrap();
            let fp = elbo(&mp, &dataset, &indices, 3).unwrap();
            let fm = elbo(&mm, &dataset, &indices, 3).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(flat[idx], fd, max_relative = 2e-4, epsilon = 1e-7);
        }
    }

    #[test]
    fn kl_gradient_zero_at_prior() {
        // At q_mu = 0, q_sqrt = I the KL gradient wrt q_mu vanishes; with a
        // zero-weight likelihood contribution the total q_mu gradient is 0.
        let mut rng = crate::rng::subsystem_rng(43, "elbo-test");
        let mut model = tiny_model(1, 3, 17, &mut rng);
        let m = model.num_inducing();
        model = model
            .with_variational(Array2::zeros((m, 1)), vec![Array2::eye(m)])
            .unwrap();
        assert_eq!(model.kl_divergence(), 0.0);
        // KL alone: gradient of -KL wrt q_mu is -q_mu = 0, and wrt the raw
        // diagonal is -(Lq_ii - 1/Lq_ii) * Lq_ii = 0 at identity.
        let dataset = single_vertex_dataset(&[0.0], vec![Target::Value(0.0)], 1);
        let (_, grad) = elbo_grad(&model, &dataset, &[0], 1).unwrap();
        // Likelihood part of d_q_mu is A g / s2; nonzero in general, so only
        // check the KL identity through a second evaluation at zero weight:
        // with y = mu = 0 the Gaussian gmu = 0, so d_q_mu = -q_mu = 0.
        for v in grad.d_q_mu.iter() {
            assert!(v.abs() < 1e-12, "d_q_mu entry {v}");
        }
    }
}
