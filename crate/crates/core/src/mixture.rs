//! Spatial Gaussian-mixture decoding and rendering.
//!
//! A latent sample is decoded slice-by-slice into K components — a center in
//! the unit square, an isotropic spread, a weight — and rendered on the
//! visual token grid:
//!
//!   g_{k,n} = exp( -||u_n - center_k||^2 / (2 * spread_k^2) )
//!   map_n   = sum_k pi_k * g_{k,n},   v_hat = softmax(map)
//!
//! Grid coordinates are normalized to the unit square so spreads are
//! resolution-independent. Both a taped (differentiable) route and a plain
//! data route exist; they agree to float precision and the tests hold them
//! together.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VifError};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, TensorId};

const MODULE: &str = "gmm-render";

/// Components narrower than this are clipped by construction (softplus +
/// floor); roughly a sixth of a cell on an 8x8 grid.
pub const SPREAD_FLOOR: f64 = 0.02;

/// Default rendering temperature. The aggregated map lives in [0, 1], so a
/// unit-temperature softmax can spread probability by at most a factor of e
/// across the grid; dividing by this temperature gives a confident mixture
/// enough contrast to actually steer attention.
pub const MAP_TEMP: f64 = 0.1;

// ── Data-level types ─────────────────────────────────────────────────

/// Decoded mixture values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMixture {
    /// Mixture weights on the simplex, length K.
    pub pi: Vec<f64>,
    /// Component centers in the unit square, `[K, 2]` as (x, y) pairs.
    pub centers: Vec<f64>,
    /// Isotropic spreads, length K, all >= SPREAD_FLOOR.
    pub spreads: Vec<f64>,
}

impl SpatialMixture {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.len() != 2 * self.pi.len() || self.spreads.len() != self.pi.len() {
            return Err(VifError::shape(MODULE, "mixture component counts disagree"));
        }
        let s: f64 = self.pi.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.pi.iter().any(|p| *p < 0.0) {
            return Err(VifError::contract(MODULE, format!("pi off the simplex (sum {s})")));
        }
        if self.centers.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(VifError::contract(MODULE, "center outside the unit square"));
        }
        if self.spreads.iter().any(|s| *s <= 0.0) {
            return Err(VifError::contract(MODULE, "nonpositive spread"));
        }
        Ok(())
    }
}

/// Rendered visual-importance distribution over the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    /// Softmax-normalized importance, length `grid_h * grid_w`.
    pub v_hat: Vec<f64>,
    /// Pre-softmax aggregated map.
    pub raw_map: Vec<f64>,
}

impl ImportanceMap {
    pub fn len(&self) -> usize {
        self.v_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_hat.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.v_hat.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.v_hat.iter().any(|v| *v < 0.0) {
            return Err(VifError::contract(MODULE, format!("v_hat off the simplex (sum {s})")));
        }
        Ok(())
    }

    /// Shannon entropy (natural log) of v_hat.
    pub fn entropy(&self) -> f64 {
        self.v_hat.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

/// Cell-center coordinates of an `h x w` grid in the unit square, flattened
/// `[h*w, 2]` as (x, y): u_(r,c) = ((c + 0.5)/w, (r + 0.5)/h).
pub fn grid_cell_centers(h: usize, w: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            u.push((c as f64 + 0.5) / w as f64);
            u.push((r as f64 + 0.5) / h as f64);
        }
    }
    u
}

/// Gaussian response of component `k` on every grid cell.
pub fn render_component(k: usize, mix: &SpatialMixture, grid: &[f64]) -> Vec<f64> {
    let (cx, cy) = (mix.centers[2 * k], mix.centers[2 * k + 1]);
    let denom = 2.0 * mix.spreads[k] * mix.spreads[k];
    grid.chunks_exact(2)
        .map(|u| {
            let (dx, dy) = (u[0] - cx, u[1] - cy);
            (-(dx * dx + dy * dy) / denom).exp()
        })
        .collect()
}

/// Aggregate all components and softmax-normalize into a distribution.
///
/// `temp` divides the aggregated map before the softmax; 1.0 is the plain
/// equation. Raw map values are bounded by 1, which caps the softmax
/// contrast at e^(1/temp) between the strongest and weakest cell, so the
/// production default runs well below 1 (see MAP_TEMP).
pub fn aggregate_and_normalize(mix: &SpatialMixture, grid: &[f64], temp: f64) -> ImportanceMap {
    let n = grid.len() / 2;
    let mut raw = vec![0.0; n];
    for k in 0..mix.k() {
        let g = render_component(k, mix, grid);
        for (m, gv) in raw.iter_mut().zip(g.iter()) {
            *m += mix.pi[k] * gv;
        }
    }
    let inv = 1.0 / temp;
    let mx = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut v_hat: Vec<f64> = raw.iter().map(|v| ((v - mx) * inv).exp()).collect();
    let z: f64 = v_hat.iter().sum();
    for v in &mut v_hat {
        *v /= z;
    }
    ImportanceMap { v_hat, raw_map: raw }
}

// ── Taped route ──────────────────────────────────────────────────────

/// Graph handles of a decoded mixture.
#[derive(Debug, Clone, Copy)]
pub struct MixtureNodes {
    /// `[K]` on the simplex.
    pub pi: TensorId,
    /// `[K, 2]` in the unit square.
    pub centers: TensorId,
    /// `[K]`, positive.
    pub spreads: TensorId,
    pub k: usize,
}

impl MixtureNodes {
    /// Copy current values out of the graph.
    pub fn to_data(&self, g: &Graph) -> SpatialMixture {
        SpatialMixture {
            pi: g.data(self.pi).to_vec(),
            centers: g.data(self.centers).to_vec(),
            spreads: g.data(self.spreads).to_vec(),
        }
    }
}

/// Graph handles of a rendered importance map.
#[derive(Debug, Clone, Copy)]
pub struct ImportanceNodes {
    /// `[N_v]` distribution.
    pub v_hat: TensorId,
    /// `[N_v]` pre-softmax map.
    pub raw: TensorId,
}

impl ImportanceNodes {
    pub fn to_data(&self, g: &Graph) -> ImportanceMap {
        ImportanceMap { v_hat: g.data(self.v_hat).to_vec(), raw_map: g.data(self.raw).to_vec() }
    }
}

/// Register the per-slice decoder MLP under `prefix` ("...decoder.").
/// The output layer starts zeroed: centers at (0.5, 0.5), uniform weights.
pub fn register_decoder_params(
    store: &mut ParamStore,
    prefix: &str,
    d_z: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let hidden = 2 * d_z;
    store.add_normal(
        &format!("{prefix}w1"),
        vec![d_z, hidden],
        1.0 / (d_z as f64).sqrt(),
        rng,
    )?;
    store.add_zeros(&format!("{prefix}b1"), vec![hidden])?;
    store.add_zeros(&format!("{prefix}w2"), vec![hidden, 4])?;
    store.add_zeros(&format!("{prefix}b2"), vec![4])?;
    Ok(())
}

/// Decode K latent slices into mixture parameters. `z` is the flattened
/// `[k * d_z]` sample; slice k feeds one MLP application.
pub fn decode_mixture(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    z: TensorId,
    k: usize,
    d_z: usize,
) -> Result<MixtureNodes> {
    if g.tensor(z).numel() != k * d_z {
        return Err(VifError::shape(
            MODULE,
            format!("latent length {} != k*d_z = {}", g.tensor(z).numel(), k * d_z),
        ));
    }
    let w1 = binder.bind(g, &format!("{prefix}w1"))?;
    let b1 = binder.bind(g, &format!("{prefix}b1"))?;
    let w2 = binder.bind(g, &format!("{prefix}w2"))?;
    let b2 = binder.bind(g, &format!("{prefix}b2"))?;

    let zmat = g.reshape(z, &[k, d_z])?;
    let h = g.matmul(zmat, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    let out = g.add(out, b2)?; // [k, 4]

    let c_logits = g.slice_cols(out, 0, 2)?;
    let centers = g.sigmoid(c_logits)?;

    let s_raw = g.slice_cols(out, 2, 3)?;
    let s_pos = g.softplus(s_raw)?;
    let s_floored = g.add_scalar(s_pos, SPREAD_FLOOR)?;
    let spreads = g.reshape(s_floored, &[k])?;

    let w_logits = g.slice_cols(out, 3, 4)?;
    let w_row = g.reshape(w_logits, &[1, k])?;
    let pi_row = g.softmax_lastdim(w_row)?;
    let pi = g.reshape(pi_row, &[k])?;

    Ok(MixtureNodes { pi, centers, spreads, k })
}

/// Render the mixture on the grid and normalize: the taped counterpart of
/// [`aggregate_and_normalize`].
pub fn render_importance(
    g: &mut Graph,
    mix: &MixtureNodes,
    grid_h: usize,
    grid_w: usize,
    temp: f64,
) -> Result<ImportanceNodes> {
    if temp <= 0.0 {
        return Err(VifError::contract(MODULE, "rendering temperature must be positive"));
    }
    let n = grid_h * grid_w;
    let k = mix.k;
    let u = grid_cell_centers(grid_h, grid_w);
    let ux: Vec<f64> = u.chunks_exact(2).map(|p| p[0]).collect();
    let uy: Vec<f64> = u.chunks_exact(2).map(|p| p[1]).collect();

    let ones_row = g.constant(&vec![1.0; n], &[1, n])?;
    let ones_col = g.constant(&vec![1.0; k], &[k, 1])?;
    let ux_row = g.constant(&ux, &[1, n])?;
    let uy_row = g.constant(&uy, &[1, n])?;

    let cx = g.slice_cols(mix.centers, 0, 1)?; // [k,1]
    let cy = g.slice_cols(mix.centers, 1, 2)?;
    let cx_mat = g.matmul(cx, ones_row)?; // [k,n]
    let cy_mat = g.matmul(cy, ones_row)?;
    let ux_mat = g.matmul(ones_col, ux_row)?;
    let uy_mat = g.matmul(ones_col, uy_row)?;

    let dx = g.sub(ux_mat, cx_mat)?;
    let dy = g.sub(uy_mat, cy_mat)?;
    let dx2 = g.mul(dx, dx)?;
    let dy2 = g.mul(dy, dy)?;
    let dist2 = g.add(dx2, dy2)?;

    let s2 = g.mul(mix.spreads, mix.spreads)?;
    let denom = g.mul_scalar(s2, 2.0)?; // [k]
    let denom_col = g.reshape(denom, &[k, 1])?;
    let denom_mat = g.matmul(denom_col, ones_row)?;

    let expo = g.div(dist2, denom_mat)?;
    let expo = g.negate(expo)?;
    let gmat = g.exp(expo)?; // [k, n]

    let pi_row = g.reshape(mix.pi, &[1, k])?;
    let raw = g.matmul(pi_row, gmat)?; // [1, n]
    let scaled = g.mul_scalar(raw, 1.0 / temp)?;
    let v_hat = g.softmax_lastdim(scaled)?;
    let raw = g.reshape(raw, &[n])?;
    let v_hat = g.reshape(v_hat, &[n])?;
    Ok(ImportanceNodes { v_hat, raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};

    fn random_mixture(rng: &mut ChaCha8Rng, k: usize) -> SpatialMixture {
        let mut pi: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        SpatialMixture {
            pi,
            centers: (0..2 * k).map(|_| rng.random_range(0.0..1.0)).collect(),
            spreads: (0..k).map(|_| rng.random_range(SPREAD_FLOOR..0.6)).collect(),
        }
    }

    /// Test-side scalar re-computation, independent of the production path.
    fn oracle_vhat(mix: &SpatialMixture, h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        let mut raw = vec![0.0f64; n];
        for r in 0..h {
            for c in 0..w {
                let ux = (c as f64 + 0.5) / w as f64;
                let uy = (r as f64 + 0.5) / h as f64;
                let mut acc = 0.0;
                for k in 0..mix.k() {
                    let dx = ux - mix.centers[2 * k];
                    let dy = uy - mix.centers[2 * k + 1];
                    let g = (-(dx * dx + dy * dy)
                        / (2.0 * mix.spreads[k] * mix.spreads[k]))
                        .exp();
                    acc += mix.pi[k] * g;
                }
                raw[r * w + c] = acc;
            }
        }
        let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    #[test]
    fn zero_initialized_decoder_gives_symmetric_mixture() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        register_decoder_params(&mut store, "dec.", 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, false);
        let z = g.constant(&vec![0.3; 16 * 4], &[16 * 4]).unwrap();
        let mix = decode_mixture(&mut g, &mut binder, "dec.", z, 16, 4).unwrap();
        let data = mix.to_data(&g);
        for p in &data.pi {
            assert!((p - 1.0 / 16.0).abs() < 1e-15);
        }
        for c in &data.centers {
            assert!((c - 0.5).abs() < 1e-15);
        }
        let expect = (0.0f64).exp().ln_1p() + SPREAD_FLOOR; // softplus(0) + floor
        for s in &data.spreads {
            assert!((s - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn decoded_weights_lie_on_simplex_and_spreads_are_floored() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        register_decoder_params(&mut store, "dec.", 4, &mut rng).unwrap();
        // Give the output layer real values.
        for n in ["dec.w2", "dec.b2"] {
            let i = store.idx(n).unwrap();
            store.values_mut(i).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        for trial in 0..100 {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, false);
            let zv: Vec<f64> = (0..8 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z = g.constant(&zv, &[32]).unwrap();
            let mix = decode_mixture(&mut g, &mut binder, "dec.", z, 8, 4).unwrap();
            let data = mix.to_data(&g);
            data.validate().unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            let s: f64 = data.pi.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(data.spreads.iter().all(|s| *s >= SPREAD_FLOOR));
        }
    }

    #[test]
    fn component_response_is_one_at_its_center() {
        // Put the center exactly on a cell center of a 4x4 grid.
        let grid = grid_cell_centers(4, 4);
        let mix = SpatialMixture {
            pi: vec![1.0],
            centers: vec![grid[2 * 5], grid[2 * 5 + 1]],
            spreads: vec![0.2],
        };
        let g = render_component(0, &mix, &grid);
        assert_eq!(g[5], 1.0);
        assert!(g.iter().all(|v| *v <= 1.0 && *v > 0.0));
    }

    #[test]
    fn response_at_sigma_sqrt2_distance_is_inv_e() {
        // d^2 = 2 sigma^2  =>  g = e^-1.
        let sigma = 0.17;
        let d = sigma * 2.0f64.sqrt();
        let grid = grid_cell_centers(4, 4);
        let (ux, uy) = (grid[0], grid[1]);
        let mix = SpatialMixture {
            pi: vec![1.0],
            centers: vec![ux + d, uy],
            spreads: vec![sigma],
        };
        let g = render_component(0, &mix, &grid);
        assert!((g[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((g[0] - 0.367879441171442).abs() < 1e-12);
    }

    #[test]
    fn response_decreases_monotonically_with_distance() {
        let grid = grid_cell_centers(1, 8);
        let mix = SpatialMixture {
            pi: vec![1.0],
            centers: vec![grid[0], grid[1]],
            spreads: vec![0.3],
        };
        let g = render_component(0, &mix, &grid);
        for w in g.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn huge_spread_yields_uniform_importance() {
        let grid = grid_cell_centers(8, 8);
        let mix = SpatialMixture {
            pi: vec![1.0],
            centers: vec![0.3, 0.7],
            spreads: vec![1e6],
        };
        let m = aggregate_and_normalize(&mix, &grid, 1.0);
        for v in &m.v_hat {
            assert!((v - 1.0 / 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn coincident_components_collapse_to_one() {
        let grid = grid_cell_centers(6, 6);
        let single = SpatialMixture {
            pi: vec![1.0],
            centers: vec![0.4, 0.6],
            spreads: vec![0.25],
        };
        let many = SpatialMixture {
            pi: vec![0.25; 4],
            centers: vec![0.4, 0.6].repeat(4),
            spreads: vec![0.25; 4],
        };
        let a = aggregate_and_normalize(&single, &grid, 1.0);
        let b = aggregate_and_normalize(&many, &grid, 1.0);
        for (x, y) in a.v_hat.iter().zip(b.v_hat.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(8usize, 8usize), (12, 12)] {
            let grid = grid_cell_centers(h, w);
            for _ in 0..200 {
                let mix = random_mixture(&mut rng, 16);
                let got = aggregate_and_normalize(&mix, &grid, 1.0);
                got.validate().unwrap();
                let want = oracle_vhat(&mix, h, w);
                for (a, b) in got.v_hat.iter().zip(want.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn taped_route_agrees_with_data_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mix = random_mixture(&mut rng, 5);
            let grid = grid_cell_centers(4, 6);
            let want = aggregate_and_normalize(&mix, &grid, 1.0);

            let mut g = Graph::new();
            let pi = g.constant(&mix.pi, &[5]).unwrap();
            let centers = g.constant(&mix.centers, &[5, 2]).unwrap();
            let spreads = g.constant(&mix.spreads, &[5]).unwrap();
            let nodes = MixtureNodes { pi, centers, spreads, k: 5 };
            let imp = render_importance(&mut g, &nodes, 4, 6, 1.0).unwrap();
            let got = imp.to_data(&g);
            for (a, b) in got.v_hat.iter().zip(want.v_hat.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shrinking_spreads_sharpens_the_peak() {
        let grid = grid_cell_centers(8, 8);
        let base = SpatialMixture {
            pi: vec![0.7, 0.3],
            centers: vec![0.32, 0.4, 0.8, 0.75],
            spreads: vec![0.3, 0.25],
        };
        let sharp = SpatialMixture {
            spreads: vec![0.12, 0.1],
            ..base.clone()
        };
        let a = aggregate_and_normalize(&base, &grid, 1.0);
        let b = aggregate_and_normalize(&sharp, &grid, 1.0);
        let max_a = a.v_hat.iter().cloned().fold(0.0, f64::max);
        let max_b = b.v_hat.iter().cloned().fold(0.0, f64::max);
        assert!(max_b > max_a, "{max_b} <= {max_a}");
    }

    #[test]
    fn full_latent_to_importance_pipeline_passes_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        register_decoder_params(&mut store, "dec.", 3, &mut rng).unwrap();
        for n in ["dec.w2", "dec.b2"] {
            let i = store.idx(n).unwrap();
            store.values_mut(i).iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let zv: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = Tensor::new(zv, vec![12]).unwrap();
        let wsum: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            move |g, ids| {
                let mut binder = Binder::new(&store, false);
                let mix = decode_mixture(g, &mut binder, "dec.", ids[0], 4, 3)?;
                let imp = render_importance(g, &mix, 3, 4, 0.25)?;
                let w = g.constant(&wsum, &[12])?;
                let p = g.mul(imp.v_hat, w)?;
                g.sum(p)
            },
            &[z],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
