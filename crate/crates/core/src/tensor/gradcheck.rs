//! Gradient checking against central finite differences.
//!
//! The differencing side never touches the reverse-mode path: it only calls
//! the forward builder at perturbed points, so it stays an independent
//! oracle for whatever `backward` computes.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Result, VifError};
use crate::tensor::{Graph, Tensor, TensorId};

/// A scalar-valued graph builder: given leaves, produce the root id.
pub trait ScalarFn: Fn(&mut Graph, &[TensorId]) -> Result<TensorId> {}
impl<F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>> ScalarFn for F {}

/// Max over all coordinates of `|analytic - central| / max(1, |central|)`.
///
/// `points` are the differentiable leaves, in the order the builder expects.
pub fn grad_check<F: ScalarFn>(f: F, points: &[Tensor], h: f64) -> Result<f64> {
    check_all_coords(&f, points, h, None)
}

/// Like [`grad_check`] but differencing only a random subset of coordinates
/// per leaf — the only affordable mode for model-scale parameter vectors.
pub fn grad_check_sampled<F: ScalarFn>(
    f: F,
    points: &[Tensor],
    h: f64,
    coords_per_leaf: usize,
    seed: u64,
) -> Result<f64> {
    check_all_coords(&f, points, h, Some((coords_per_leaf, seed)))
}

fn check_all_coords<F: ScalarFn>(
    f: &F,
    points: &[Tensor],
    h: f64,
    sample: Option<(usize, u64)>,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(VifError::contract("gradcheck", "step h must be positive"));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> =
        points.iter().map(|p| g.leaf(p.clone().with_grad())).collect();
    let root = f(&mut g, &ids)?;
    if !g.tensor(root).is_scalar() {
        return Err(VifError::contract("gradcheck", "builder must produce a scalar root"));
    }
    if !g.tensor(root).is_finite() {
        return Err(VifError::numeric("gradcheck", "non-finite value at the root"));
    }
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(points.iter())
        .map(|(id, p)| g.grad(*id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    drop(g);

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let root = f(&mut g, &ids)?;
        let v = g.scalar_value(root)?;
        if !v.is_finite() {
            return Err(VifError::numeric("gradcheck", "non-finite value during differencing"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut max_rel = 0.0f64;
    for (ti, point) in points.iter().enumerate() {
        let coords: Vec<usize> = match sample {
            None => (0..point.numel()).collect(),
            Some((k, seed)) => {
                let mut rng = StdRng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9e3779b97f4a7c15));
                (0..k.min(point.numel()))
                    .map(|_| rng.random_range(0..point.numel()))
                    .collect()
            }
        };
        for ci in coords {
            let orig = work[ti].data[ci];
            work[ti].data[ci] = orig + h;
            let up = eval(&work)?;
            work[ti].data[ci] = orig - h;
            let down = eval(&work)?;
            work[ti].data[ci] = orig;
            let central = (up - down) / (2.0 * h);
            if !central.is_finite() {
                return Err(VifError::numeric("gradcheck", "non-finite central difference"));
            }
            let rel = (analytic[ti][ci] - central).abs() / central.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
