//! Alternative kernels on message tuples, used by the kernel comparison
//! study: a Gaussian kernel on the stacked (mean, variance) parameters, the
//! per-message expected-product features with their closed Gaussian form,
//! and tuple kernels built from per-message embeddings by summation
//! (feature concatenation) or multiplication (Kronecker feature product).

use super::map::Stage1Map;
use super::{FeatureError, MessageTuple, Result};
use crate::expfam::{ExpFamMessage, Family};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Random Fourier features for a product Gaussian kernel on the parameter
/// vector `(m₁,…,m_c, v₁,…,v_c)` with per-coordinate lengthscales: the
/// "mean–variance" kernel. It ignores everything about a message beyond its
/// first two moments, which is exactly why it serves as a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvFeatureMap {
    mean_widths: Vec<f64>,
    var_widths: Vec<f64>,
    omega: DMatrix<f64>,
    b: DVector<f64>,
}

impl MvFeatureMap {
    pub fn new(seed: u64, d: usize, mean_widths: &[f64], var_widths: &[f64]) -> Result<Self> {
        if mean_widths.len() != var_widths.len() {
            return Err(FeatureError::ArityMismatch {
                got: var_widths.len(),
                expected: mean_widths.len(),
            });
        }
        let all_ok = |w: &[f64]| !w.is_empty() && w.iter().all(|&x| x > 0.0 && x.is_finite());
        if !all_ok(mean_widths) || !all_ok(var_widths) || d == 0 {
            return Err(FeatureError::ImproperParameters);
        }
        let c = mean_widths.len();
        let scales: Vec<f64> = mean_widths
            .iter()
            .chain(var_widths.iter())
            .map(|w| 1.0 / w)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = DMatrix::from_fn(d, 2 * c, |_, j| {
            let z: f64 = rng.sample(StandardNormal);
            z * scales[j]
        });
        let b = DVector::from_fn(d, |_, _| rng.gen::<f64>() * std::f64::consts::TAU);
        Ok(MvFeatureMap {
            mean_widths: mean_widths.to_vec(),
            var_widths: var_widths.to_vec(),
            omega,
            b,
        })
    }

    pub fn arity(&self) -> usize {
        self.mean_widths.len()
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    /// `√(2/D) cos(ωᵢᵀ(m₁..m_c, v₁..v_c) + bᵢ)`.
    pub fn features(&self, t: &MessageTuple) -> Result<DVector<f64>> {
        let rep = mean_variance_vector(t, self.arity())?;
        let scale = (2.0 / self.dim() as f64).sqrt();
        let mut out = &self.omega * rep + &self.b;
        out.apply(|v| *v = scale * v.cos());
        Ok(out)
    }
}

/// Exact mean–variance kernel
/// `exp(−½ Σ_l (Δm_l/w_l^m)² − ½ Σ_l (Δv_l/w_l^v)²)`.
pub fn mv_exact_kernel(
    r: &MessageTuple,
    s: &MessageTuple,
    mean_widths: &[f64],
    var_widths: &[f64],
) -> Result<f64> {
    if mean_widths.len() != var_widths.len()
        || mean_widths.iter().chain(var_widths.iter()).any(|&w| !(w > 0.0) || !w.is_finite())
    {
        return Err(FeatureError::ImproperParameters);
    }
    let c = mean_widths.len();
    let (pr, ps) = (mean_variance_vector(r, c)?, mean_variance_vector(s, c)?);
    let mut quad = 0.0;
    for l in 0..c {
        let dm = (pr[l] - ps[l]) / mean_widths[l];
        let dv = (pr[c + l] - ps[c + l]) / var_widths[l];
        quad += dm * dm + dv * dv;
    }
    Ok((-0.5 * quad).exp())
}

fn mean_variance_vector(t: &MessageTuple, arity: usize) -> Result<DVector<f64>> {
    if t.arity() != arity {
        return Err(FeatureError::ArityMismatch { got: t.arity(), expected: arity });
    }
    let mut rep = DVector::zeros(2 * arity);
    for (l, msg) in t.messages().iter().enumerate() {
        let (m, v) = msg.mean_variance().expect("tuple members are proper");
        rep[l] = m;
        rep[arity + l] = v;
    }
    Ok(rep)
}

/// Mean-embedding features of a single Gaussian message:
/// `√(2/D)(cos(ω_i m + b_i) e^{−ω_i² v/2})_i`, whose inner products
/// approximate the closed-form expected-product kernel. Restricted to
/// Gaussians because that closed form is what the features are certified
/// against; other families go through the tuple machinery instead.
pub fn expected_product_features(msg: &ExpFamMessage, map: &Stage1Map) -> Result<DVector<f64>> {
    if msg.family() != Family::Gaussian {
        return Err(FeatureError::FamilyMismatch(msg.family()));
    }
    if map.arity() != 1 {
        return Err(FeatureError::ArityMismatch { got: map.arity(), expected: 1 });
    }
    map.features(&MessageTuple::single(msg.clone())?)
}

fn per_message_features(t: &MessageTuple, maps: &[Stage1Map]) -> Result<Vec<DVector<f64>>> {
    if maps.len() != t.arity() {
        return Err(FeatureError::ArityMismatch { got: t.arity(), expected: maps.len() });
    }
    t.messages()
        .iter()
        .zip(maps)
        .map(|(msg, map)| {
            if map.arity() != 1 {
                return Err(FeatureError::ArityMismatch { got: map.arity(), expected: 1 });
            }
            map.features(&MessageTuple::single(msg.clone())?)
        })
        .collect()
}

/// Features of the sum-of-per-message-kernels tuple kernel: per-message
/// embedding features concatenated into `ℝ^{Σ D_l}`, so inner products add
/// across components.
pub fn sum_features(t: &MessageTuple, maps: &[Stage1Map]) -> Result<DVector<f64>> {
    let parts = per_message_features(t, maps)?;
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut offset = 0;
    for p in parts {
        out.rows_mut(offset, p.len()).copy_from(&p);
        offset += p.len();
    }
    Ok(out)
}

/// Features of the product-of-per-message-kernels tuple kernel: the
/// Kronecker product of per-message embedding features, dimension `∏ D_l`
/// (guarded at 10⁷), so inner products multiply across components.
pub fn product_features(t: &MessageTuple, maps: &[Stage1Map]) -> Result<DVector<f64>> {
    let parts = per_message_features(t, maps)?;
    let dim = parts.iter().try_fold(1usize, |acc, p| {
        let next = acc.checked_mul(p.len()).unwrap_or(usize::MAX);
        if next > 10_000_000 {
            Err(FeatureError::DimensionOverflow(next))
        } else {
            Ok(next)
        }
    })?;
    let mut out = DVector::from_element(1, 1.0);
    for p in parts {
        let mut next = DVector::zeros(out.len() * p.len());
        for i in 0..out.len() {
            for j in 0..p.len() {
                next[i * p.len() + j] = out[i] * p[j];
            }
        }
        out = next;
    }
    debug_assert_eq!(out.len(), dim);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::exact::expected_product_inner_gaussian;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_tuple(m: f64, v: f64) -> MessageTuple {
        MessageTuple::single(ExpFamMessage::gaussian(m, v).unwrap()).unwrap()
    }

    #[test]
    fn dimensional_bookkeeping_for_sum_and_product() {
        let maps = [Stage1Map::new(1, 3, &[1.0]).unwrap(), Stage1Map::new(2, 3, &[1.0]).unwrap()];
        let t = MessageTuple::pair(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::gaussian(1.0, 2.0).unwrap(),
        )
        .unwrap();
        assert_eq!(sum_features(&t, &maps).unwrap().len(), 6);
        assert_eq!(product_features(&t, &maps).unwrap().len(), 9);
    }

    #[test]
    fn oversized_kronecker_product_is_rejected() {
        let maps: Vec<Stage1Map> =
            (0..3).map(|i| Stage1Map::new(i, 500, &[1.0]).unwrap()).collect();
        let t = MessageTuple::new(vec![
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
        ])
        .unwrap();
        assert!(matches!(
            product_features(&t, &maps).unwrap_err(),
            FeatureError::DimensionOverflow(125_000_000)
        ));
    }

    #[test]
    fn sum_kernel_on_identical_tuples_approaches_arity() {
        // With kernel width vastly larger than the message variances each
        // per-message self inner product ⟨μ, μ⟩ is ≈ 1, so the sum kernel
        // evaluates to ≈ c.
        let maps = [
            Stage1Map::new(10, 2000, &[100.0]).unwrap(),
            Stage1Map::new(11, 2000, &[100.0]).unwrap(),
        ];
        let t = MessageTuple::pair(
            ExpFamMessage::gaussian(0.3, 0.005).unwrap(),
            ExpFamMessage::gaussian(-1.0, 0.01).unwrap(),
        )
        .unwrap();
        let f = sum_features(&t, &maps).unwrap();
        let c = 2.0f64;
        assert_abs_diff_eq!(f.dot(&f), c, epsilon = 3.0 * c.sqrt() / (2000.0f64).sqrt());
    }

    #[test]
    fn product_kernel_on_identical_tuples_approaches_one() {
        let maps = [
            Stage1Map::new(12, 2000, &[100.0]).unwrap(),
            Stage1Map::new(13, 2000, &[100.0]).unwrap(),
        ];
        let t = MessageTuple::pair(
            ExpFamMessage::gaussian(0.3, 0.005).unwrap(),
            ExpFamMessage::gaussian(-1.0, 0.01).unwrap(),
        )
        .unwrap();
        let f = product_features(&t, &maps).unwrap();
        assert_abs_diff_eq!(f.dot(&f), 1.0, epsilon = 0.15);
    }

    #[test]
    fn kronecker_inner_product_factorizes() {
        let maps = [Stage1Map::new(3, 40, &[2.0]).unwrap(), Stage1Map::new(4, 30, &[1.5]).unwrap()];
        let r = MessageTuple::pair(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::beta(2.0, 1.0).unwrap(),
        )
        .unwrap();
        let s = MessageTuple::pair(
            ExpFamMessage::gaussian(1.0, 0.5).unwrap(),
            ExpFamMessage::beta(1.0, 2.0).unwrap(),
        )
        .unwrap();
        let prod = product_features(&r, &maps).unwrap().dot(&product_features(&s, &maps).unwrap());
        let by_parts: f64 = r
            .messages()
            .iter()
            .zip(s.messages())
            .zip(&maps)
            .map(|((a, b), map)| {
                let fa = map.features(&MessageTuple::single(a.clone()).unwrap()).unwrap();
                let fb = map.features(&MessageTuple::single(b.clone()).unwrap()).unwrap();
                fa.dot(&fb)
            })
            .product();
        assert_abs_diff_eq!(prod, by_parts, epsilon = 1e-12);
    }

    #[test]
    fn mv_kernel_matches_its_features() {
        let mean_w = [1.5, 0.7];
        let var_w = [2.0, 1.0];
        let map = MvFeatureMap::new(21, 4000, &mean_w, &var_w).unwrap();
        let r = MessageTuple::pair(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::beta(2.0, 2.0).unwrap(),
        )
        .unwrap();
        let s = MessageTuple::pair(
            ExpFamMessage::gaussian(0.8, 1.3).unwrap(),
            ExpFamMessage::beta(3.0, 1.0).unwrap(),
        )
        .unwrap();
        let exact = mv_exact_kernel(&r, &s, &mean_w, &var_w).unwrap();
        let approx = map.features(&r).unwrap().dot(&map.features(&s).unwrap());
        assert_abs_diff_eq!(approx, exact, epsilon = 3.0 / (4000.0f64).sqrt());
        // Identical tuples: exact kernel is exactly 1, features within 3/√D.
        assert_eq!(mv_exact_kernel(&r, &r, &mean_w, &var_w).unwrap(), 1.0);
        let f = map.features(&r).unwrap();
        assert_abs_diff_eq!(f.dot(&f), 1.0, epsilon = 3.0 / (4000.0f64).sqrt());
    }

    #[test]
    fn mv_kernel_mean_shift_by_one_lengthscale() {
        let mean_w = [2.5];
        let var_w = [1.0];
        let r = gaussian_tuple(0.0, 1.0);
        let s = gaussian_tuple(2.5, 1.0);
        let exact = mv_exact_kernel(&r, &s, &mean_w, &var_w).unwrap();
        assert_abs_diff_eq!(exact, (-0.5f64).exp(), epsilon = 1e-15);
        let map = MvFeatureMap::new(8, 4000, &mean_w, &var_w).unwrap();
        let approx = map.features(&r).unwrap().dot(&map.features(&s).unwrap());
        assert_abs_diff_eq!(approx, exact, epsilon = 3.0 / (4000.0f64).sqrt());
    }

    #[test]
    fn mv_rejects_degenerate_widths() {
        assert!(matches!(
            MvFeatureMap::new(1, 10, &[0.0], &[1.0]).unwrap_err(),
            FeatureError::ImproperParameters
        ));
        let r = gaussian_tuple(0.0, 1.0);
        assert!(mv_exact_kernel(&r, &r, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn expected_product_features_require_gaussian() {
        let map = Stage1Map::new(1, 10, &[1.0]).unwrap();
        let err = expected_product_features(&ExpFamMessage::beta(2.0, 1.0).unwrap(), &map);
        assert_eq!(err.unwrap_err(), FeatureError::FamilyMismatch(Family::Beta));
    }

    #[test]
    fn expected_product_inner_tracks_closed_form_on_random_pairs() {
        let sigma2 = 3.0;
        let map = Stage1Map::new(99, 2000, &[sigma2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let r = ExpFamMessage::gaussian(rng.gen::<f64>() * 6.0 - 3.0, 0.2 + rng.gen::<f64>() * 2.0)
                .unwrap();
            let s = ExpFamMessage::gaussian(rng.gen::<f64>() * 6.0 - 3.0, 0.2 + rng.gen::<f64>() * 2.0)
                .unwrap();
            let approx = expected_product_features(&r, &map)
                .unwrap()
                .dot(&expected_product_features(&s, &map).unwrap());
            let exact = expected_product_inner_gaussian(&r, &s, sigma2).unwrap();
            worst = worst.max((approx - exact).abs());
        }
        assert!(worst < 0.05, "worst deviation {worst}");
    }

    #[test]
    fn near_point_mass_reduces_to_plain_cosine_features() {
        let mut map = Stage1Map::new(40, 3, &[1.0]).unwrap();
        map.override_coefficients(
            nalgebra::DMatrix::from_column_slice(3, 1, &[0.5, -1.2, 2.0]),
            nalgebra::DVector::from_column_slice(&[0.1, 4.0, 2.2]),
        );
        let msg = ExpFamMessage::gaussian(1.7, 1e-12).unwrap();
        let feats = expected_product_features(&msg, &map).unwrap();
        let scale = (2.0f64 / 3.0).sqrt();
        for (i, (w, b)) in [(0.5f64, 0.1f64), (-1.2, 4.0), (2.0, 2.2)].iter().enumerate() {
            assert_abs_diff_eq!(feats[i], scale * (w * 1.7 + b).cos(), epsilon = 1e-5);
        }
    }

    #[test]
    fn stage1_inner_products_are_unbiased_across_maps() {
        let sigma2 = 2.0;
        let r = ExpFamMessage::gaussian(0.4, 1.1).unwrap();
        let s = ExpFamMessage::gaussian(-0.9, 0.6).unwrap();
        let exact = expected_product_inner_gaussian(&r, &s, sigma2).unwrap();
        let mut values = Vec::new();
        for seed in 0..50u64 {
            let map = Stage1Map::new(1000 + seed, 300, &[sigma2]).unwrap();
            let inner = expected_product_features(&r, &map)
                .unwrap()
                .dot(&expected_product_features(&s, &map).unwrap());
            values.push(inner);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (values.len() - 1) as f64;
        let se = (var / values.len() as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-6,
            "mean {mean} vs exact {exact} (s.e. {se})"
        );
    }
}
