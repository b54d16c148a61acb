//! Graph convolutional Gaussian processes.
//!
//! Signals living on graphs (image grids, superpixel graphs, triangular
//! meshes) are summarized into per-vertex patches by a pairwise weight
//! tensor; a shared patch-response function with a GP prior then induces a
//! GP over whole-signal outputs, trained with sparse variational inference
//! over inducing patches.
//!
//! The crate is organized along the pipeline:
//!
//! * [`graph`]: graphs, signals, shortest-path distances.
//! * [`weighting`]: geodesic-polar and MoNet weighting functions, the
//!   `(J*K) x |V| x |V|` weight tensor.
//! * [`patch`]: the `|V| x (J*K*d)` patch matrix.
//! * [`kernel`]: the RBF patch-response kernel and the graph convolutional
//!   kernel with analytic gradients.
//! * [`svgp`]: sparse variational classifier (ELBO, Adam, prediction).
//! * [`mesh`]: triangular meshes, Fast Marching distances, geodesic ray
//!   unfolding for angular tables.
//! * [`datasets`]: MNIST IDX ingestion, superpixel graphs, synthetic mesh
//!   dataset with intrinsic descriptors.
//! * [`cache`]: binary cache containers for the precomputed artifacts.
//! * [`verify`]: self-check suites comparing the fast paths against
//!   independent oracles.
//!
//! Inner loops fan out over rayon when the `parallel` feature (default) is
//! enabled and fall back to plain loops otherwise; either way reductions run
//! in a fixed order, so seeded runs are bitwise reproducible.

pub mod cache;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod linalg;
pub mod mesh;
mod par;
pub mod patch;
pub mod rng;
pub mod svgp;
pub mod verify;
pub mod weighting;

pub use error::{Error, Result};
pub use par::parallelism_enabled;
