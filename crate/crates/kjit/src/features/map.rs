//! The frozen random-feature maps of the two-stage construction.
//!
//! All coefficients are drawn once at construction from a seeded generator
//! and stored explicitly, so a map is immutable, shareable across threads,
//! and reproducible: the same `(seed, dims, widths)` always yields
//! bit-identical coefficients, and persistence round-trips them bit-exactly
//! through JSON (shortest-round-trip float encoding on both ends).

use super::{cf, FeatureError, KernelWidths, MessageTuple, Result};
use crate::numeric::derive_seed;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Frequencies and phases approximating the *inner* Gaussian kernel on tuple
/// values: row `i` holds `ω_i ∈ ℝ^c` with `ω_{i,l} ∼ N(0, 1/σ_l²)` plus a
/// phase `b_i ∼ U[0, 2π)`. Feature entry `i` of a tuple `r` is
/// `√(2/D_in) · E_{x∼r} cos(ω_iᵀx + b_i)`, evaluated through the product of
/// per-message characteristic functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Map {
    sigma2: Vec<f64>,
    omega: DMatrix<f64>,
    b: DVector<f64>,
}

impl Stage1Map {
    /// Draw order is fixed (row-major `ω`, then all phases) so that a seed
    /// pins the coefficients regardless of how the map is used afterwards.
    pub fn new(seed: u64, d_in: usize, sigma2: &[f64]) -> Result<Self> {
        if sigma2.is_empty() || sigma2.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(FeatureError::ImproperParameters);
        }
        if d_in == 0 {
            return Err(FeatureError::ImproperParameters);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = sigma2.len();
        let scales: Vec<f64> = sigma2.iter().map(|s| 1.0 / s.sqrt()).collect();
        let omega = DMatrix::from_fn(d_in, c, |_, l| {
            let z: f64 = rng.sample(StandardNormal);
            z * scales[l]
        });
        let b = DVector::from_fn(d_in, |_, _| rng.gen::<f64>() * std::f64::consts::TAU);
        Ok(Stage1Map { sigma2: sigma2.to_vec(), omega, b })
    }

    pub fn arity(&self) -> usize {
        self.sigma2.len()
    }

    pub fn d_in(&self) -> usize {
        self.omega.nrows()
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    /// `√(2/D_in)(E cos(ω_iᵀx + b_i))_i`. The expectation factorizes over
    /// the tuple because the product distribution is independent across
    /// components: `E cos(ωᵀx+b) = Re(e^{jb} ∏_l cf_l(ω_l))`.
    pub fn features(&self, t: &MessageTuple) -> Result<DVector<f64>> {
        if t.arity() != self.arity() {
            return Err(FeatureError::ArityMismatch { got: t.arity(), expected: self.arity() });
        }
        let scale = (2.0 / self.d_in() as f64).sqrt();
        let phi = DVector::from_fn(self.d_in(), |i, _| {
            let (mut re, mut im) = (1.0, 0.0);
            for (l, msg) in t.messages().iter().enumerate() {
                let (cr, ci) = cf::char_fn(msg, self.omega[(i, l)]);
                let (nr, ni) = (re * cr - im * ci, re * ci + im * cr);
                re = nr;
                im = ni;
            }
            let (sb, cb) = self.b[i].sin_cos();
            scale * (cb * re - sb * im)
        });
        Ok(phi)
    }

    #[cfg(test)]
    pub(crate) fn override_coefficients(&mut self, omega: DMatrix<f64>, b: DVector<f64>) {
        assert_eq!(omega.nrows(), self.omega.nrows());
        assert_eq!(omega.ncols(), self.omega.ncols());
        self.omega = omega;
        self.b = b;
    }
}

/// The full two-stage map: stage 1 embeds a message tuple into `ℝ^{D_in}`
/// ([`Stage1Map`]), stage 2 applies plain random cosine features for a
/// Gaussian kernel of width `γ²` on that embedding, producing the final
/// regression inputs in `ℝ^{D_out}` whose inner products approximate
/// `κ(r, s) = exp(-‖μ_r - μ_s‖²/2γ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    seed: u64,
    gamma2: f64,
    stage1: Stage1Map,
    nu: DMatrix<f64>,
    c: DVector<f64>,
}

impl FeatureMap {
    /// Stage-1 and stage-2 coefficients come from independent streams
    /// derived from `seed`, so changing `d_out` leaves the stage-1
    /// embedding untouched.
    pub fn new(seed: u64, d_in: usize, d_out: usize, widths: &KernelWidths) -> Result<Self> {
        if d_out == 0 {
            return Err(FeatureError::ImproperParameters);
        }
        let stage1 = Stage1Map::new(derive_seed(seed, 1), d_in, &widths.sigma2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let nu_sd = 1.0 / widths.gamma2.sqrt();
        let nu = DMatrix::from_fn(d_out, d_in, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * nu_sd
        });
        let c = DVector::from_fn(d_out, |_, _| rng.gen::<f64>() * std::f64::consts::TAU);
        Ok(FeatureMap { seed, gamma2: widths.gamma2, stage1, nu, c })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn arity(&self) -> usize {
        self.stage1.arity()
    }

    pub fn d_in(&self) -> usize {
        self.stage1.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.nu.nrows()
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }

    pub fn widths(&self) -> KernelWidths {
        KernelWidths { sigma2: self.stage1.sigma2().to_vec(), gamma2: self.gamma2 }
    }

    pub fn stage1(&self) -> &Stage1Map {
        &self.stage1
    }

    pub fn stage1_features(&self, t: &MessageTuple) -> Result<DVector<f64>> {
        self.stage1.features(t)
    }

    /// `√(2/D_out)(cos(ν_iᵀφ + c_i))_i`; every entry is bounded by
    /// `√(2/D_out)`, so `‖ψ‖² ≤ 2`.
    pub fn stage2_features(&self, phi: &DVector<f64>) -> Result<DVector<f64>> {
        if phi.len() != self.d_in() {
            return Err(FeatureError::ArityMismatch { got: phi.len(), expected: self.d_in() });
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteInput("stage-1 feature vector"));
        }
        let scale = (2.0 / self.d_out() as f64).sqrt();
        let mut psi = &self.nu * phi + &self.c;
        psi.apply(|v| *v = scale * v.cos());
        Ok(psi)
    }

    /// Both stages composed: the regression input for one tuple.
    pub fn features(&self, t: &MessageTuple) -> Result<DVector<f64>> {
        let phi = self.stage1_features(t)?;
        self.stage2_features(&phi)
    }

    /// Feature vectors for a batch of tuples as columns of a
    /// `D_out × n` matrix, computed in parallel.
    pub fn feature_matrix(&self, tuples: &[MessageTuple]) -> Result<DMatrix<f64>> {
        let columns = tuples
            .par_iter()
            .map(|t| self.features(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&columns))
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), MapIoError> {
        let file = FeatureMapFile { format: FEATURE_MAP_FORMAT.to_string(), map: self.clone() };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::result::Result<Self, MapIoError> {
        let json = std::fs::read_to_string(path)?;
        let file: FeatureMapFile = serde_json::from_str(&json)?;
        if file.format != FEATURE_MAP_FORMAT {
            return Err(MapIoError::UnsupportedFormat(file.format));
        }
        Ok(file.map)
    }
}

const FEATURE_MAP_FORMAT: &str = "kjit-feature-map-v1";

#[derive(Serialize, Deserialize)]
struct FeatureMapFile {
    format: String,
    map: FeatureMap,
}

/// Failures while persisting or restoring a [`FeatureMap`].
#[derive(Debug, Error)]
pub enum MapIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed feature-map file: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported feature-map format `{0}`")]
    UnsupportedFormat(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::ExpFamMessage;
    use approx::assert_abs_diff_eq;

    fn tuple_gaussian(m: f64, v: f64) -> MessageTuple {
        MessageTuple::single(ExpFamMessage::gaussian(m, v).unwrap()).unwrap()
    }

    #[test]
    fn unit_frequency_zero_phase_entry_is_exp_minus_one() {
        // E cos(x), x ∼ N(0, 2) is e^{-1}; with four features the entry is
        // √(2/4)·e^{-1} ≈ 0.7071·0.36788.
        let mut s1 = Stage1Map::new(9, 4, &[1.0]).unwrap();
        s1.override_coefficients(DMatrix::from_element(4, 1, 1.0), DVector::zeros(4));
        let phi = s1.features(&tuple_gaussian(0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(phi[0], (2.0f64 / 4.0).sqrt() * 0.36787944117144233, epsilon = 1e-12);
    }

    #[test]
    fn zero_frequency_entry_is_scale() {
        let mut s1 = Stage1Map::new(5, 3, &[1.0]).unwrap();
        s1.override_coefficients(DMatrix::zeros(3, 1), DVector::zeros(3));
        let t = MessageTuple::single(ExpFamMessage::beta(2.5, 0.7).unwrap()).unwrap();
        let phi = s1.features(&t).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(phi[i], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn point_mass_entry_is_plain_cosine() {
        let mut s1 = Stage1Map::new(5, 2, &[1.0]).unwrap();
        s1.override_coefficients(
            DMatrix::from_element(2, 1, 3.0),
            DVector::from_element(2, 0.7),
        );
        let phi = s1.features(&tuple_gaussian(2.0, 1e-12)).unwrap();
        let expected = (2.0f64 / 2.0).sqrt() * (3.0 * 2.0 + 0.7f64).cos();
        assert_abs_diff_eq!(phi[0], expected, epsilon = 1e-5);
    }

    #[test]
    fn entries_stay_within_feature_bound() {
        let s1 = Stage1Map::new(11, 64, &[2.0, 1.5]).unwrap();
        let bound = (2.0 / 64.0f64).sqrt() + 1e-9;
        let t = MessageTuple::pair(
            ExpFamMessage::gaussian(-1.4, 0.6).unwrap(),
            ExpFamMessage::beta(4.0, 2.0).unwrap(),
        )
        .unwrap();
        for v in s1.features(&t).unwrap().iter() {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn same_seed_same_map_different_seed_different_map() {
        let widths = KernelWidths::new(vec![1.3], 0.8).unwrap();
        let a = FeatureMap::new(42, 16, 8, &widths).unwrap();
        let b = FeatureMap::new(42, 16, 8, &widths).unwrap();
        let c = FeatureMap::new(43, 16, 8, &widths).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let t = tuple_gaussian(0.3, 1.1);
        assert_eq!(a.features(&t).unwrap(), b.features(&t).unwrap());
    }

    #[test]
    fn growing_d_out_preserves_stage1_coefficients() {
        let widths = KernelWidths::new(vec![1.3], 0.8).unwrap();
        let small = FeatureMap::new(42, 16, 8, &widths).unwrap();
        let large = FeatureMap::new(42, 16, 64, &widths).unwrap();
        assert_eq!(small.stage1, large.stage1);
    }

    #[test]
    fn stage2_self_inner_product_is_near_one() {
        let widths = KernelWidths::new(vec![2.0], 1.5).unwrap();
        let map = FeatureMap::new(3, 50, 2000, &widths).unwrap();
        let psi = map.features(&tuple_gaussian(0.4, 0.9)).unwrap();
        // κ(r, r) = exp(0) = 1; the cosine features approximate it as
        // 1 + (1/D)Σ cos(2θ_i).
        assert_abs_diff_eq!(psi.dot(&psi), 1.0, epsilon = 0.05);
        assert!(psi.norm_squared() <= 2.0);
    }

    #[test]
    fn stage2_inner_product_tracks_gaussian_kernel_on_embeddings() {
        let widths = KernelWidths::new(vec![2.0], 1.5).unwrap();
        let map = FeatureMap::new(7, 100, 4000, &widths).unwrap();
        let (r, s) = (tuple_gaussian(0.0, 1.0), tuple_gaussian(1.2, 0.5));
        let (phi_r, phi_s) = (map.stage1_features(&r).unwrap(), map.stage1_features(&s).unwrap());
        let exact = (-(&phi_r - &phi_s).norm_squared() / (2.0 * widths.gamma2)).exp();
        let approx = map
            .stage2_features(&phi_r)
            .unwrap()
            .dot(&map.stage2_features(&phi_s).unwrap());
        assert_abs_diff_eq!(approx, exact, epsilon = 3.0 / (4000.0f64).sqrt());
    }

    #[test]
    fn single_output_feature_is_a_bounded_cosine() {
        let widths = KernelWidths::new(vec![1.0], 1.0).unwrap();
        let map = FeatureMap::new(1, 10, 1, &widths).unwrap();
        let psi = map.features(&tuple_gaussian(0.0, 1.0)).unwrap();
        assert_eq!(psi.len(), 1);
        assert!(psi[0].abs() <= 2.0f64.sqrt());
    }

    #[test]
    fn stage2_rejects_bad_inputs() {
        let widths = KernelWidths::new(vec![1.0], 1.0).unwrap();
        let map = FeatureMap::new(1, 4, 4, &widths).unwrap();
        assert_eq!(
            map.stage2_features(&DVector::zeros(3)).unwrap_err(),
            FeatureError::ArityMismatch { got: 3, expected: 4 }
        );
        let err = map.stage2_features(&DVector::from_element(4, f64::NAN)).unwrap_err();
        assert!(matches!(err, FeatureError::NonFiniteInput(_)));
    }

    #[test]
    fn tuple_arity_must_match_map() {
        let widths = KernelWidths::new(vec![1.0, 1.0], 1.0).unwrap();
        let map = FeatureMap::new(1, 4, 4, &widths).unwrap();
        let err = map.features(&tuple_gaussian(0.0, 1.0)).unwrap_err();
        assert_eq!(err, FeatureError::ArityMismatch { got: 1, expected: 2 });
    }

    #[test]
    fn feature_matrix_matches_per_tuple_features() {
        let widths = KernelWidths::new(vec![1.0], 2.0).unwrap();
        let map = FeatureMap::new(5, 30, 40, &widths).unwrap();
        let tuples: Vec<MessageTuple> =
            (0..6).map(|i| tuple_gaussian(i as f64 * 0.3, 1.0 + i as f64 * 0.1)).collect();
        let mat = map.feature_matrix(&tuples).unwrap();
        assert_eq!((mat.nrows(), mat.ncols()), (40, 6));
        for (j, t) in tuples.iter().enumerate() {
            assert_eq!(DVector::from(mat.column(j)), map.features(t).unwrap());
        }
    }

    #[test]
    fn persistence_round_trips_bit_exactly() {
        let widths = KernelWidths::new(vec![0.7, 3.1], 2.2).unwrap();
        let map = FeatureMap::new(123, 24, 12, &widths).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        map.save(&path).unwrap();
        let restored = FeatureMap::load(&path).unwrap();
        assert_eq!(map, restored);
        let t = MessageTuple::pair(
            ExpFamMessage::gaussian(0.1, 2.0).unwrap(),
            ExpFamMessage::beta(2.0, 1.0).unwrap(),
        )
        .unwrap();
        let (a, b) = (map.features(&t).unwrap(), restored.features(&t).unwrap());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn load_rejects_unknown_format() {
        let widths = KernelWidths::new(vec![1.0], 1.0).unwrap();
        let map = FeatureMap::new(1, 2, 2, &widths).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let json = serde_json::to_string(&FeatureMapFile {
            format: "kjit-feature-map-v999".to_string(),
            map,
        })
        .unwrap();
        std::fs::write(&path, json).unwrap();
        assert!(matches!(FeatureMap::load(&path).unwrap_err(), MapIoError::UnsupportedFormat(_)));
    }
}
