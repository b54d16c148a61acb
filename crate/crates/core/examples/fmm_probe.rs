use gcgp_core::mesh::{planar_grid, rho_table};
use std::time::Instant;

fn main() {
    for n in [8usize, 10, 14, 20, 28] {
        let start = Instant::now();
        let mesh = planar_grid(n, n, 1.0, 1.0).unwrap();
        let table = rho_table(&mesh).unwrap();
        let mut worst = 0.0f64;
        let mut worst_pair = (0, 0);
        for i in 0..n * n {
            for j in 0..n * n {
                if i == j { continue; }
                let pi = mesh.position(i);
                let pj = mesh.position(j);
                let e = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
                let rel = (table.matrix[[i, j]] - e).abs() / e;
                if rel > worst { worst = rel; worst_pair = (i, j); }
            }
        }
        println!(
            "n={n:2} worst={worst:.5} at {worst_pair:?} asym={:.4} ({:?})",
            table.max_asymmetry,
            start.elapsed()
        );
    }
}
