//! Dataset construction: MNIST IDX ingestion, superpixel graphs, and the
//! synthetic mesh classification dataset with intrinsic descriptors.

mod descriptors;
mod idx;
mod images;
mod superpixel;
mod synth;

pub use descriptors::intrinsic_descriptors;
pub use idx::{load_idx, write_idx, ImageDataset};
pub use images::{synth_image_dataset, SynthImage};
pub use superpixel::{
    build_superpixels, build_superpixels_batch, read_superpixel_dataset, superpixel_coords,
    write_superpixel_dataset, SuperpixelGraph,
};
pub use synth::{sphere_mesh, synth_mesh_dataset, MeshDataset, MeshItem};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Signal;

/// Seeded k-means with k-means++ initialization, a fixed iteration cap, and
/// lowest-index tie-breaking. Determinism outranks clustering optimality:
/// given the same `rng` stream the output is identical on every platform.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..points.len());
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the lowest
            // index not yet used as a centroid.
            (0..points.len())
                .find(|&i| centroids.iter().all(|c| sq_dist(&points[i], c) > 0.0))
                .unwrap_or(0)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    // Lloyd iterations.
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                // Strict less-than keeps the lowest index on ties.
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster at the point farthest from its
                // centroid (lowest index on ties).
                let mut far = 0;
                let mut far_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    let d = sq_dist(p, &centroids[assignment[i]]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[c] = points[far].clone();
                assignment[far] = c;
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centroids)
}

/// Per-channel mean and standard deviation over a signal collection.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Computes per-channel statistics (constant channels get unit scale).
pub fn channel_stats(signals: &[Signal]) -> Result<ChannelStats> {
    if signals.is_empty() {
        return Err(Error::InvalidArgument("no signals to standardize".into()));
    }
    let d = signals[0].dim();
    let mut mean = vec![0.0f64; d];
    let mut count = 0usize;
    for s in signals {
        if s.dim() != d {
            return Err(Error::DimensionMismatch("signal dimensions differ".into()));
        }
        for row in s.values().rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        count += s.num_vertices();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; d];
    for s in signals {
        for row in s.values().rows() {
            for (q, &v) in row.iter().enumerate() {
                var[q] += (v - mean[q]) * (v - mean[q]);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Applies `(x - mean) / std` per channel.
pub fn standardize_with(signal: &Signal, stats: &ChannelStats) -> Result<Signal> {
    if signal.dim() != stats.mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} channels, stats cover {}",
            signal.dim(),
            stats.mean.len()
        )));
    }
    let mut values = signal.values().to_owned();
    for mut row in values.rows_mut() {
        for (q, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[q]) / stats.std[q];
        }
    }
    Signal::new(values)
}

/// Per-channel standardization across a collection of signals (zero mean,
/// unit variance). Raw intrinsic descriptors span several orders of
/// magnitude, which a shared-lengthscale RBF cannot absorb on its own.
pub fn standardize_signals(signals: &[Signal]) -> Result<Vec<Signal>> {
    let stats = channel_stats(signals)?;
    signals.iter().map(|s| standardize_with(s, &stats)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = crate::rng::subsystem_rng(60, "datasets-test");
        let mut points = Vec::new();
        for c in 0..3 {
            let center = 10.0 * c as f64;
            for _ in 0..20 {
                points.push(vec![
                    center + rng.random_range(-0.5..0.5),
                    center + rng.random_range(-0.5..0.5),
                ]);
            }
        }
        let centroids = kmeans(&points, 3, 100, &mut rng).unwrap();
        let mut found = [false; 3];
        for c in &centroids {
            for (i, target) in [0.0, 10.0, 20.0].iter().enumerate() {
                if (c[0] - target).abs() < 1.0 && (c[1] - target).abs() < 1.0 {
                    found[i] = true;
                }
            }
        }
        assert!(found.iter().all(|&f| f), "centroids {centroids:?}");
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let points: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i % 7) as f64, (i % 11) as f64])
            .collect();
        let mut r1 = crate::rng::subsystem_rng(61, "datasets-test");
        let mut r2 = crate::rng::subsystem_rng(61, "datasets-test");
        let a = kmeans(&points, 5, 100, &mut r1).unwrap();
        let b = kmeans(&points, 5, 100, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_rejects_too_few_points() {
        let points = vec![vec![0.0], vec![1.0]];
        let mut rng = crate::rng::subsystem_rng(62, "datasets-test");
        assert!(kmeans(&points, 3, 10, &mut rng).is_err());
    }

    #[test]
    fn standardize_centers_and_scales() {
        let s1 = Signal::new(
            ndarray::Array2::from_shape_vec((2, 2), vec![1.0, 100.0, 3.0, 300.0]).unwrap(),
        )
        .unwrap();
        let s2 = Signal::new(
            ndarray::Array2::from_shape_vec((2, 2), vec![5.0, 500.0, 7.0, 700.0]).unwrap(),
        )
        .unwrap();
        let out = standardize_signals(&[s1, s2]).unwrap();
        let mut mean = [0.0f64; 2];
        let mut var = [0.0f64; 2];
        for s in &out {
            for row in s.values().rows() {
                mean[0] += row[0];
                mean[1] += row[1];
            }
        }
        for m in &mut mean {
            *m /= 4.0;
        }
        for s in &out {
            for row in s.values().rows() {
                var[0] += (row[0] - mean[0]).powi(2);
                var[1] += (row[1] - mean[1]).powi(2);
            }
        }
        for (m, v) in mean.iter().zip(&var) {
            approx::assert_relative_eq!(*m, 0.0, epsilon = 1e-12);
            approx::assert_relative_eq!(v / 4.0, 1.0, max_relative = 1e-12);
        }
    }
}
