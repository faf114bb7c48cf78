//! Synthetic sequences, brute-force oracles and the toy association trainer.

mod ablation;
mod scenario;
mod train;

pub use ablation::{
    observation_agds, run_ablation, run_ablation_with, track_sequence, training_scenario, AblationConfig,
    AblationReport, AblationRow, ABLATION_ROWS,
};
pub use scenario::{
    generate_sequence, oriented_rect, InstanceSpec, Motion, Observation, Occlusion, ScenarioConfig, SyntheticFrame,
    SyntheticSequence,
};
pub use train::{association_accuracy, toy_train, TrainConfig, TrainReport, TrainedModel};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point, Quad};

/// Largest matrix `brute_force_assignment` will enumerate.
pub const BRUTE_FORCE_MAX: usize = 8;

/// Random strictly convex quad inside the box `[x0, x0+w] × [y0, y0+h]`, one
/// vertex per box quadrant, clockwise from the top-left.
pub fn random_convex_quad<R: Rng + ?Sized>(rng: &mut R, x0: f64, y0: f64, w: f64, h: f64) -> Quad {
    let (hw, hh) = (w / 2.0, h / 2.0);
    let cells = [(0.0, 0.0), (hw, 0.0), (hw, hh), (0.0, hh)];
    loop {
        let mut c = [0.0; 8];
        for (k, (cx, cy)) in cells.iter().enumerate() {
            c[2 * k] = x0 + cx + rng.random_range(0.0..hw);
            c[2 * k + 1] = y0 + cy + rng.random_range(0.0..hh);
        }
        let q = Quad::from_coords(c, 1.0);
        if q.is_valid() && q.area() > 0.05 * w * h {
            return q;
        }
    }
}

/// Point-sampling IoU estimate over the joint bounding box.
pub fn monte_carlo_iou(a: &Quad, b: &Quad, samples: usize, seed: u64) -> Result<f64> {
    if samples < 10_000 {
        return Err(Error::usage(format!(
            "monte carlo iou needs at least 10000 samples, got {}",
            samples
        )));
    }
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let (x0, y0, x1, y1) = (ax0.min(bx0), ay0.min(by0), ax1.max(bx1), ay1.max(by1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inter, mut union) = (0u64, 0u64);
    for _ in 0..samples {
        let p = Point::new(rng.random_range(x0..=x1), rng.random_range(y0..=y1));
        let (ia, ib) = (a.contains(p), b.contains(p));
        inter += (ia && ib) as u64;
        union += (ia || ib) as u64;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Exact minimum-cost permutation by enumeration. Returns the column chosen
/// for every row and the total, summed in row order.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::usage(format!(
            "brute-force assignment refuses n = {} (limit {})",
            n, BRUTE_FORCE_MAX
        )));
    }
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::shape("brute-force assignment needs a square matrix"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), total(cost, &perm));
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            let j = if i % 2 == 0 { 0 } else { c[i] };
            perm.swap(j, i);
            let t = total(cost, &perm);
            if t < best.1 {
                best = (perm.clone(), t);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}
