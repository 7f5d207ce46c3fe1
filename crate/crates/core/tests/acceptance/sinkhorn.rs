use std::time::Instant;

use collabtrace_core::propagation::sinkhorn_knopp;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K_MAX: usize = 1000;
const EPS: f64 = 1e-9;

/// Entries uniform on (0, 1].
fn random_positive(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| 1.0 - rng.random_range(0.0..1.0))
}

pub fn check() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    let mut max_iter = 0;
    for case in 0..1000 {
        let n = 2 + case % 9;
        let a = random_positive(&mut rng, n);
        let (w, rep) = sinkhorn_knopp(&a, K_MAX, EPS).map_err(|e| e.to_string())?;
        ensure!(
            rep.converged,
            "case {case} ({n}x{n}) did not converge in {K_MAX} iterations"
        );
        ensure!(rep.iterations <= K_MAX, "case {case}: {} iterations", rep.iterations);
        max_iter = max_iter.max(rep.iterations);
        for i in 0..n {
            let row: f64 = w.row(i).sum();
            let col: f64 = w.column(i).sum();
            worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
        ensure!(worst <= 1e-6, "case {case}: margin error {worst:e}");
    }

    let mut worst_perm = 0.0f64;
    for case in 0..100 {
        let n = 2 + case % 9;
        let a = random_positive(&mut rng, n);
        let mut rp: Vec<usize> = (0..n).collect();
        let mut cp: Vec<usize> = (0..n).collect();
        rp.shuffle(&mut rng);
        cp.shuffle(&mut rng);
        let permuted = DMatrix::from_fn(n, n, |i, j| a[(rp[i], cp[j])]);
        let (w, _) = sinkhorn_knopp(&a, K_MAX, EPS).map_err(|e| e.to_string())?;
        let (wp, _) = sinkhorn_knopp(&permuted, K_MAX, EPS).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..n {
                worst_perm = worst_perm.max((wp[(i, j)] - w[(rp[i], cp[j])]).abs());
            }
        }
        ensure!(worst_perm <= 1e-9, "permutation case {case}: deviation {worst_perm:e}");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s, budget 5s");
    Ok(format!(
        "1000 uniform (0,1] matrices, max margin error {worst:.1e}, max {max_iter} iterations; 100 permutation cases, max deviation {worst_perm:.1e}"
    ))
}
