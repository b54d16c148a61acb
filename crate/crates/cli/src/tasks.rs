//! Dataset and model assembly for each pipeline.
//!
//! Every task produces a training [`PatchDataset`], an optional test set,
//! a configured kernel, and training defaults. All randomness derives from
//! the single config seed.

use std::path::PathBuf;
use std::sync::Arc;

use gcgp_core::cache;
use gcgp_core::datasets::{
    build_superpixels, build_superpixels_batch, channel_stats, load_idx, standardize_with,
    superpixel_coords, synth_image_dataset, synth_mesh_dataset, SuperpixelGraph,
};
use gcgp_core::graph::Signal;
use gcgp_core::kernel::{GraphConvKernel, Lengthscales, RbfKernel};
use gcgp_core::mesh::{default_max_length, GeodesicTables};
use gcgp_core::rng::{derive_seed, subsystem_rng};
use gcgp_core::svgp::{InducingInit, PatchDataset, Target, TrainConfig};
use gcgp_core::weighting::{image_grid_coords, PairCoordinates, PolarWeightParams};
use gcgp_core::{Error, Result};

use crate::config::{RunConfig, Task};

pub struct TaskSetup {
    pub train: PatchDataset,
    pub test: Option<PatchDataset>,
    pub kernel: GraphConvKernel,
    pub train_cfg: TrainConfig,
}

struct TaskDefaults {
    j_bins: usize,
    k_bins: usize,
    rho_init: &'static [f64],
    sigma_rho: f64,
    trainable: &'static str,
    batch_size: usize,
    learning_rate: f64,
    num_inducing: usize,
    max_steps: usize,
}

fn defaults(task: Task) -> TaskDefaults {
    match task {
        Task::ToyImage => TaskDefaults {
            j_bins: 4,
            k_bins: 2,
            rho_init: &[0.0, 1.0],
            sigma_rho: 1.0,
            trainable: "rho,sigma_rho",
            batch_size: 12,
            learning_rate: 0.02,
            num_inducing: 16,
            max_steps: 200,
        },
        Task::ToySuperpixels => TaskDefaults {
            j_bins: 4,
            k_bins: 2,
            rho_init: &[0.0, 2.0],
            sigma_rho: 1.5,
            trainable: "rho,sigma_rho",
            batch_size: 12,
            learning_rate: 0.02,
            num_inducing: 24,
            max_steps: 250,
        },
        // The standard image setup: three radial and eight angular bins,
        // radial centers {0,1,2}, batch 200, 750 inducing points, 0.001.
        Task::Mnist => TaskDefaults {
            j_bins: 8,
            k_bins: 3,
            rho_init: &[0.0, 1.0, 2.0],
            sigma_rho: 1.0,
            trainable: "rho,sigma_rho",
            batch_size: 200,
            learning_rate: 0.001,
            num_inducing: 750,
            max_steps: 5000,
        },
        Task::Superpixels => TaskDefaults {
            j_bins: 8,
            k_bins: 3,
            rho_init: &[0.0, 1.0, 2.0],
            sigma_rho: 1.0,
            trainable: "rho,sigma_rho",
            batch_size: 200,
            learning_rate: 0.001,
            num_inducing: 750,
            max_steps: 5000,
        },
        // 16 angular and 5 radial bins over four descriptor channels gives
        // 320-dimensional patches; weighting hyperparameters stay fixed
        // because the angular tables cannot be differentiated.
        Task::SynthMesh => TaskDefaults {
            j_bins: 16,
            k_bins: 5,
            rho_init: &[],
            sigma_rho: 0.0,
            trainable: "",
            batch_size: 30,
            learning_rate: 0.001,
            num_inducing: 150,
            max_steps: 400,
        },
    }
}

pub fn weighting_params(cfg: &RunConfig, task: Task) -> Result<PolarWeightParams> {
    let d = defaults(task);
    let j = cfg.usize_or("j_bins", d.j_bins)?;
    let k = cfg.usize_or("k_bins", d.k_bins)?;
    let mut rho = cfg.f64_list_or("rho_init", d.rho_init)?;
    let mut sigma_rho = cfg.f64_or("sigma_rho", d.sigma_rho)?;
    if rho.is_empty() || rho.len() != k {
        if task == Task::SynthMesh && cfg.get("rho_init").is_none() {
            // Filled in later from the mesh scale; placeholder values here.
            rho = (0..k).map(|i| i as f64).collect();
            if sigma_rho <= 0.0 {
                sigma_rho = 1.0;
            }
        } else {
            return Err(Error::InvalidArgument(format!(
                "rho_init needs {k} comma-separated centers"
            )));
        }
    }
    let mut params = PolarWeightParams::with_uniform_angles(j, rho, sigma_rho)?;
    if let Some(st) = cfg.get("sigma_theta") {
        let st: f64 = st
            .parse()
            .map_err(|_| Error::InvalidArgument("sigma_theta must be a number".into()))?;
        params = PolarWeightParams::new(
            params.rho_centers().to_vec(),
            params.sigma_rho(),
            params.theta_centers().to_vec(),
            st,
        )?;
    }
    let trainable_spec = cfg
        .get("trainable")
        .unwrap_or(d.trainable)
        .to_string();
    let mut rho_mask = vec![false; k];
    let mut sigma_mask = false;
    for token in trainable_spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "rho" => rho_mask = vec![true; k],
            "sigma_rho" => sigma_mask = true,
            "theta" | "sigma_theta" => {
                return Err(Error::Unsupported(
                    "angular bin parameters cannot be trained: that would require \
                     recomputing the geodesic tables at every step"
                        .into(),
                ))
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown trainable parameter '{other}'"
                )))
            }
        }
    }
    params.set_trainable(&rho_mask, sigma_mask)?;
    Ok(params)
}

pub fn train_config(cfg: &RunConfig, task: Task) -> Result<TrainConfig> {
    let d = defaults(task);
    let mut tc = TrainConfig::new(
        cfg.usize_or("batch_size", d.batch_size)?,
        cfg.f64_or("learning_rate", d.learning_rate)?,
        cfg.usize_or("num_inducing", d.num_inducing)?,
        cfg.usize_or("max_steps", d.max_steps)?,
    )?;
    tc.seed = cfg.seed()?;
    tc.mc_samples = cfg.usize_or("mc_samples", 20)?;
    tc.plateau_window = cfg.usize_or("plateau_window", 200)?;
    tc.plateau_rel_tol = cfg.f64_or("plateau_tol", 1e-5)?;
    tc.inducing_init = match cfg.get("inducing_init").unwrap_or("random") {
        "random" => InducingInit::RandomSubset,
        "kmeans" => InducingInit::KMeans,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown inducing_init '{other}' (expected random or kmeans)"
            )))
        }
    };
    tc.validate()?;
    Ok(tc)
}

fn kernel_for(
    cfg: &RunConfig,
    params: PolarWeightParams,
    signal_dim: usize,
    train: &PatchDataset,
) -> Result<GraphConvKernel> {
    let variance = cfg.f64_or("variance", 1.0)?;
    let mut lengthscale = cfg.f64_or("lengthscale", 0.0)?;
    let probe = GraphConvKernel::new(
        RbfKernel::shared(variance, 1.0)?,
        params.clone(),
        signal_dim,
    )?;
    if lengthscale <= 0.0 {
        lengthscale = median_patch_distance(train, &params, probe.patch_dim())?;
    }
    let base = if cfg.bool_or("ard", false)? {
        RbfKernel::new(
            variance,
            Lengthscales::PerDim(vec![lengthscale; probe.patch_dim()]),
        )?
    } else {
        RbfKernel::shared(variance, lengthscale)?
    };
    GraphConvKernel::new(base, params, signal_dim)
}

/// Median pairwise distance over a strided sample of training patch rows;
/// the standard starting point when no lengthscale is configured.
fn median_patch_distance(
    dataset: &PatchDataset,
    params: &PolarWeightParams,
    _patch_dim: usize,
) -> Result<f64> {
    let items = dataset.len().min(8);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let stride = dataset.len().div_ceil(items);
    for idx in (0..dataset.len()).step_by(stride) {
        let z = dataset.build_patches(idx, params)?;
        let n = z.num_vertices();
        let row_stride = n.div_ceil(8).max(1);
        for r in (0..n).step_by(row_stride) {
            rows.push(z.values().row(r).to_vec());
        }
        if rows.len() > 64 {
            break;
        }
    }
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(dists[dists.len() / 2].max(1e-3))
}

fn grid_signal(pixels: &[u8]) -> Result<Signal> {
    Signal::from_column(pixels.iter().map(|&p| p as f64 / 255.0).collect())
}

/// Per-class subsample: a seeded shuffle of each class's indices, keeping
/// the first `per_class` (0 keeps everything).
fn per_class_subsample(
    labels: &[u8],
    per_class: usize,
    num_classes: usize,
    seed: u64,
) -> Vec<usize> {
    if per_class == 0 {
        return (0..labels.len()).collect();
    }
    use rand::seq::SliceRandom;
    let mut rng = subsystem_rng(seed, "train-subsample");
    let mut picked = Vec::new();
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] as usize == class)
            .collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        picked.extend(idx);
    }
    picked.sort_unstable();
    picked
}

pub fn assemble(cfg: &RunConfig, use_cache: bool) -> Result<TaskSetup> {
    let task = cfg.task()?;
    match task {
        Task::ToyImage => assemble_toy_image(cfg),
        Task::ToySuperpixels => assemble_toy_superpixels(cfg),
        Task::Mnist => assemble_mnist(cfg),
        Task::Superpixels => assemble_superpixels(cfg),
        Task::SynthMesh => assemble_synth_mesh(cfg, use_cache),
    }
}

fn assemble_toy_image(cfg: &RunConfig) -> Result<TaskSetup> {
    let task = Task::ToyImage;
    let classes = cfg.usize_or("toy_classes", 3)?;
    let per_class = cfg.usize_or("toy_per_class", 12)?;
    let test_per_class = cfg.usize_or("toy_test_per_class", 8)?;
    let size = cfg.usize_or("toy_size", 10)?;
    let seed = cfg.seed()?;
    let images = synth_image_dataset(
        classes,
        per_class + test_per_class,
        size,
        size,
        derive_seed(seed, "toy-data"),
    )?;
    let coords = image_grid_coords(size, size)?;
    let mut train_items = Vec::new();
    let mut test_items = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let within = i % (per_class + test_per_class);
        let item = (grid_signal(&img.pixels)?, Target::Class(img.label));
        if within < per_class {
            train_items.push(item);
        } else {
            test_items.push(item);
        }
    }
    let train = PatchDataset::shared_coords(coords.clone(), train_items, classes)?;
    let test = PatchDataset::shared_coords(coords, test_items, classes)?;
    let params = weighting_params(cfg, task)?;
    let kernel = kernel_for(cfg, params, 1, &train)?;
    Ok(TaskSetup {
        train,
        test: Some(test),
        kernel,
        train_cfg: train_config(cfg, task)?,
    })
}

fn superpixel_items(
    graphs: &[SuperpixelGraph],
) -> Result<Vec<(PairCoordinates, Signal, Target)>> {
    graphs
        .iter()
        .map(|g| {
            Ok((
                superpixel_coords(g)?,
                Signal::from_column(g.values.clone())?,
                Target::Class(g.label),
            ))
        })
        .collect()
}

fn assemble_toy_superpixels(cfg: &RunConfig) -> Result<TaskSetup> {
    let task = Task::ToySuperpixels;
    let classes = cfg.usize_or("toy_classes", 3)?;
    let per_class = cfg.usize_or("toy_per_class", 12)?;
    let test_per_class = cfg.usize_or("toy_test_per_class", 8)?;
    let size = cfg.usize_or("toy_size", 28)?;
    let seed = cfg.seed()?;
    let images = synth_image_dataset(
        classes,
        per_class + test_per_class,
        size,
        size,
        derive_seed(seed, "toy-data"),
    )?;
    let k_fg = cfg.usize_or("superpixel_fg", 50)?;
    let k_bg = cfg.usize_or("superpixel_bg", 25)?;
    let threshold = match cfg.f64_or("edge_threshold", 0.0)? {
        t if t > 0.0 => Some(t),
        _ => None,
    };
    let mut train_graphs = Vec::new();
    let mut test_graphs = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let g = build_superpixels(
            &img.pixels,
            size,
            size,
            img.label,
            k_fg,
            k_bg,
            threshold,
            derive_seed(seed, &format!("superpixel-{i}")),
        )?;
        if i % (per_class + test_per_class) < per_class {
            train_graphs.push(g);
        } else {
            test_graphs.push(g);
        }
    }
    let train = PatchDataset::per_item_coords(superpixel_items(&train_graphs)?, classes)?;
    let test = PatchDataset::per_item_coords(superpixel_items(&test_graphs)?, classes)?;
    let params = weighting_params(cfg, task)?;
    let kernel = kernel_for(cfg, params, 1, &train)?;
    Ok(TaskSetup {
        train,
        test: Some(test),
        kernel,
        train_cfg: train_config(cfg, task)?,
    })
}

fn assemble_mnist(cfg: &RunConfig) -> Result<TaskSetup> {
    let task = Task::Mnist;
    let train_raw = load_idx(&cfg.path("mnist_images")?, &cfg.path("mnist_labels")?)?;
    let picked = per_class_subsample(
        &train_raw.labels,
        cfg.usize_or("train_per_class", 0)?,
        10,
        cfg.seed()?,
    );
    let coords = image_grid_coords(train_raw.cols, train_raw.rows)?;
    let train_items: Vec<(Signal, Target)> = picked
        .iter()
        .map(|&i| {
            Ok((
                grid_signal(train_raw.image(i))?,
                Target::Class(train_raw.labels[i] as usize),
            ))
        })
        .collect::<Result<_>>()?;
    let train = PatchDataset::shared_coords(coords.clone(), train_items, 10)?;
    let test = match (cfg.get("mnist_test_images"), cfg.get("mnist_test_labels")) {
        (Some(_), Some(_)) => {
            let test_raw = load_idx(
                &cfg.path("mnist_test_images")?,
                &cfg.path("mnist_test_labels")?,
            )?;
            let limit = cfg.usize_or("test_limit", 0)?;
            let n = if limit == 0 {
                test_raw.num
            } else {
                test_raw.num.min(limit)
            };
            let items: Vec<(Signal, Target)> = (0..n)
                .map(|i| {
                    Ok((
                        grid_signal(test_raw.image(i))?,
                        Target::Class(test_raw.labels[i] as usize),
                    ))
                })
                .collect::<Result<_>>()?;
            Some(PatchDataset::shared_coords(coords, items, 10)?)
        }
        _ => None,
    };
    let params = weighting_params(cfg, task)?;
    let kernel = kernel_for(cfg, params, 1, &train)?;
    Ok(TaskSetup {
        train,
        test,
        kernel,
        train_cfg: train_config(cfg, task)?,
    })
}

fn assemble_superpixels(cfg: &RunConfig) -> Result<TaskSetup> {
    let task = Task::Superpixels;
    let train_raw = load_idx(&cfg.path("mnist_images")?, &cfg.path("mnist_labels")?)?;
    let picked = per_class_subsample(
        &train_raw.labels,
        cfg.usize_or("train_per_class", 0)?,
        10,
        cfg.seed()?,
    );
    let k_fg = cfg.usize_or("superpixel_fg", 50)?;
    let k_bg = cfg.usize_or("superpixel_bg", 25)?;
    let threshold = match cfg.f64_or("edge_threshold", 0.0)? {
        t if t > 0.0 => Some(t),
        _ => None,
    };
    let seed = cfg.seed()?;
    let train_graphs =
        build_superpixels_batch(&train_raw, &picked, k_fg, k_bg, threshold, seed)?;
    let train = PatchDataset::per_item_coords(superpixel_items(&train_graphs)?, 10)?;
    let test = match (cfg.get("mnist_test_images"), cfg.get("mnist_test_labels")) {
        (Some(_), Some(_)) => {
            let test_raw = load_idx(
                &cfg.path("mnist_test_images")?,
                &cfg.path("mnist_test_labels")?,
            )?;
            let limit = cfg.usize_or("test_limit", 0)?;
            let n = if limit == 0 {
                test_raw.num
            } else {
                test_raw.num.min(limit)
            };
            let indices: Vec<usize> = (0..n).collect();
            let graphs =
                build_superpixels_batch(&test_raw, &indices, k_fg, k_bg, threshold, seed)?;
            Some(PatchDataset::per_item_coords(
                superpixel_items(&graphs)?,
                10,
            )?)
        }
        _ => None,
    };
    let params = weighting_params(cfg, task)?;
    let kernel = kernel_for(cfg, params, 1, &train)?;
    Ok(TaskSetup {
        train,
        test,
        kernel,
        train_cfg: train_config(cfg, task)?,
    })
}

/// Digest text covering everything the mesh geodesic tables depend on.
pub fn mesh_tables_digest(cfg: &RunConfig, mesh_index: usize) -> Result<String> {
    Ok(cache::params_digest(&format!(
        "synth-mesh-tables;{};index={mesh_index}",
        cfg.digest_text(&[
            "seed",
            "synth_classes",
            "synth_poses",
            "resolution",
            "j_bins",
            "max_ray_length",
        ])
    )))
}

pub fn mesh_tables_path(cfg: &RunConfig, mesh_index: usize) -> PathBuf {
    cfg.cache_dir()
        .join(format!("mesh-{mesh_index:03}.gt"))
}

fn assemble_synth_mesh(cfg: &RunConfig, use_cache: bool) -> Result<TaskSetup> {
    let task = Task::SynthMesh;
    let classes = cfg.usize_or("synth_classes", 10)?;
    let poses = cfg.usize_or("synth_poses", 10)?;
    let train_poses = cfg.usize_or("synth_train_poses", 7)?;
    if train_poses >= poses {
        return Err(Error::InvalidArgument(format!(
            "synth_train_poses ({train_poses}) must be below synth_poses ({poses})"
        )));
    }
    let resolution = cfg.usize_or("resolution", 500)?;
    let seed = cfg.seed()?;
    let dataset = synth_mesh_dataset(classes, poses, resolution, derive_seed(seed, "mesh-data"))?;
    let j_bins = cfg.usize_or("j_bins", defaults(task).j_bins)?;
    // One max ray length for the whole dataset, from the first mesh.
    let max_len = match cfg.f64_or("max_ray_length", 0.0)? {
        l if l > 0.0 => l,
        _ => default_max_length(&dataset.items[0].mesh)?,
    };
    // Geodesic tables per mesh, cached on disk when available.
    let mut tables: Vec<GeodesicTables> = Vec::with_capacity(dataset.items.len());
    for (i, item) in dataset.items.iter().enumerate() {
        let digest = mesh_tables_digest(cfg, i)?;
        let path = mesh_tables_path(cfg, i);
        if use_cache && cache::cache_is_current(&path, cache::MAGIC_GEODESIC_TABLES, &digest) {
            tables.push(cache::load_geodesic_tables(&path, &digest)?);
        } else {
            let t = GeodesicTables::compute(&item.mesh, j_bins, max_len)?;
            if use_cache {
                std::fs::create_dir_all(cfg.cache_dir())?;
                cache::save_geodesic_tables(&path, &t, &digest)?;
            }
            tables.push(t);
        }
    }
    // Radial bins sized to the observed geodesic scale unless configured.
    let k_bins = cfg.usize_or("k_bins", defaults(task).k_bins)?;
    let max_rho = tables[0]
        .rho
        .iter()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let mut params = weighting_params(cfg, task)?;
    if cfg.get("rho_init").is_none() {
        let top = 0.6 * max_rho;
        let centers: Vec<f64> = (0..k_bins)
            .map(|i| top * i as f64 / (k_bins.max(2) - 1) as f64)
            .collect();
        let sigma = if cfg.get("sigma_rho").is_none() {
            (top / (k_bins.max(2) - 1) as f64).max(1e-3)
        } else {
            params.sigma_rho()
        };
        let mut rebuilt = PolarWeightParams::new(
            centers,
            sigma,
            params.theta_centers().to_vec(),
            params.sigma_theta(),
        )?;
        rebuilt.set_trainable(params.trainable_rho(), params.trainable_sigma_rho())?;
        params = rebuilt;
    }
    // Angular tables are lengths here, so the angular width must live on the
    // same scale; default to the radial width unless configured.
    if cfg.get("sigma_theta").is_none() {
        let sigma_theta = params.sigma_rho().max(1e-3) * 1.5;
        let mut rebuilt = PolarWeightParams::new(
            params.rho_centers().to_vec(),
            params.sigma_rho(),
            params.theta_centers().to_vec(),
            sigma_theta,
        )?;
        rebuilt.set_trainable(params.trainable_rho(), params.trainable_sigma_rho())?;
        params = rebuilt;
    }
    // Standardize descriptor channels with training-split statistics.
    let is_train = |i: usize| (i % poses) < train_poses;
    let train_signals: Vec<Signal> = dataset
        .items
        .iter()
        .enumerate()
        .filter(|(i, _)| is_train(*i))
        .map(|(_, item)| item.signal.clone())
        .collect();
    let stats = channel_stats(&train_signals)?;
    let mut train_items = Vec::new();
    let mut test_items = Vec::new();
    for (i, (item, t)) in dataset.items.iter().zip(tables).enumerate() {
        let coords = t.into_pair_coordinates()?;
        let signal = standardize_with(&item.signal, &stats)?;
        let entry = (coords, signal, Target::Class(item.label));
        if is_train(i) {
            train_items.push(entry);
        } else {
            test_items.push(entry);
        }
    }
    let train = PatchDataset::per_item_coords(train_items, classes)?;
    let test = PatchDataset::per_item_coords(test_items, classes)?;
    let kernel = kernel_for(cfg, params, 4, &train)?;
    Ok(TaskSetup {
        train,
        test: Some(test),
        kernel,
        train_cfg: train_config(cfg, task)?,
    })
}

/// Shared coordinate tables can be reused by reference; helper for tests.
pub fn shared_coords_of(dataset: &PatchDataset) -> Arc<PairCoordinates> {
    dataset.coords(0).clone()
}
