//! Data-driven kernel widths.
//!
//! Inner widths come from the spread of the tuples themselves: `σ_l²` is the
//! average variance of the `l`-th message across the batch. The outer width
//! `γ²` is the median pairwise squared embedding distance
//! `‖μ_r − μ_s‖² = ⟨μ_r,μ_r⟩ − 2⟨μ_r,μ_s⟩ + ⟨μ_s,μ_s⟩`, measured through
//! stage-1 features at the chosen `Σ` (the pairwise pass is subsampled to at
//! most 500 tuples to bound the quadratic cost).

use super::map::Stage1Map;
use super::{FeatureError, KernelWidths, MessageTuple, Result};

const PAIRWISE_SUBSAMPLE: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct MedianHeuristicResult {
    pub widths: KernelWidths,
    /// True when every pairwise embedding distance was (numerically) zero —
    /// e.g. all tuples identical — and `γ²` fell back to 1.
    pub degenerate_pairs: bool,
}

/// Choose `(Σ, γ²)` from a batch of message tuples. `d_in` and `seed`
/// control the stage-1 features used for the pairwise-distance pass; the
/// chosen widths do not depend on them beyond Monte Carlo wobble in `γ²`.
pub fn median_heuristic(
    tuples: &[MessageTuple],
    d_in: usize,
    seed: u64,
) -> Result<MedianHeuristicResult> {
    if tuples.len() < 2 {
        return Err(FeatureError::NotEnoughTuples { needed: 2, got: tuples.len() });
    }
    let arity = tuples[0].arity();
    for t in tuples {
        if t.arity() != arity {
            return Err(FeatureError::ArityMismatch { got: t.arity(), expected: arity });
        }
    }

    let mut sigma2 = vec![0.0; arity];
    for t in tuples {
        for (l, msg) in t.messages().iter().enumerate() {
            let (_, v) = msg.mean_variance().expect("tuple members are proper");
            sigma2[l] += v;
        }
    }
    for s in &mut sigma2 {
        *s /= tuples.len() as f64;
    }

    let subsample: Vec<&MessageTuple> = if tuples.len() <= PAIRWISE_SUBSAMPLE {
        tuples.iter().collect()
    } else {
        (0..PAIRWISE_SUBSAMPLE).map(|k| &tuples[k * tuples.len() / PAIRWISE_SUBSAMPLE]).collect()
    };

    let map = Stage1Map::new(seed, d_in, &sigma2)?;
    let features = subsample.iter().map(|t| map.features(t)).collect::<Result<Vec<_>>>()?;

    let mut distances = Vec::with_capacity(features.len() * (features.len() - 1) / 2);
    for i in 0..features.len() {
        for j in (i + 1)..features.len() {
            distances.push((&features[i] - &features[j]).norm_squared());
        }
    }
    distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = distances.len() / 2;
    let median = if distances.len() % 2 == 1 {
        distances[mid]
    } else {
        0.5 * (distances[mid - 1] + distances[mid])
    };

    let degenerate_pairs = median < 1e-12;
    if degenerate_pairs {
        log::warn!("median pairwise embedding distance is zero; falling back to γ² = 1");
    }
    let gamma2 = if degenerate_pairs { 1.0 } else { median };
    Ok(MedianHeuristicResult { widths: KernelWidths::new(sigma2, gamma2)?, degenerate_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::ExpFamMessage;
    use crate::features::exact::embedding_inner;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inner_width_is_the_average_variance() {
        let tuples = vec![
            MessageTuple::single(ExpFamMessage::gaussian(0.0, 1.0).unwrap()).unwrap(),
            MessageTuple::single(ExpFamMessage::gaussian(0.0, 3.0).unwrap()).unwrap(),
        ];
        let result = median_heuristic(&tuples, 50, 1).unwrap();
        assert_abs_diff_eq!(result.widths.sigma2[0], 2.0, epsilon = 1e-12);
        assert!(!result.degenerate_pairs);
    }

    #[test]
    fn identical_tuples_fall_back_to_unit_outer_width() {
        let t = MessageTuple::single(ExpFamMessage::gaussian(0.5, 1.5).unwrap()).unwrap();
        let result = median_heuristic(&vec![t; 10], 50, 1).unwrap();
        assert!(result.degenerate_pairs);
        assert_eq!(result.widths.gamma2, 1.0);
    }

    #[test]
    fn needs_at_least_two_tuples() {
        let t = MessageTuple::single(ExpFamMessage::gaussian(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(
            median_heuristic(&[t], 10, 1).unwrap_err(),
            FeatureError::NotEnoughTuples { needed: 2, got: 1 }
        );
    }

    #[test]
    fn mixed_arities_are_rejected() {
        let a = MessageTuple::single(ExpFamMessage::gaussian(0.0, 1.0).unwrap()).unwrap();
        let b = MessageTuple::pair(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::beta(1.0, 1.0).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            median_heuristic(&[a, b], 10, 1).unwrap_err(),
            FeatureError::ArityMismatch { got: 2, expected: 1 }
        ));
    }

    #[test]
    fn outer_width_sits_inside_the_exact_distance_distribution() {
        // γ² from the feature-space median must land well inside the spread
        // of the exact pairwise embedding distances (1st–99th percentile).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tuples: Vec<MessageTuple> = (0..100)
            .map(|_| {
                MessageTuple::pair(
                    ExpFamMessage::gaussian(rng.gen::<f64>() * 6.0 - 3.0, 0.1 + rng.gen::<f64>() * 2.9)
                        .unwrap(),
                    ExpFamMessage::beta(1.0 + rng.gen::<f64>() * 3.0, 1.0 + rng.gen::<f64>() * 3.0)
                        .unwrap(),
                )
                .unwrap()
            })
            .collect();
        let result = median_heuristic(&tuples, 600, 4).unwrap();
        assert!(!result.degenerate_pairs);

        let sigma2 = &result.widths.sigma2;
        let mut selfs = Vec::new();
        for t in &tuples {
            let mut rr = 1.0;
            for (l, m) in t.messages().iter().enumerate() {
                rr *= embedding_inner(m, m, sigma2[l]).unwrap();
            }
            selfs.push(rr);
        }
        let mut exact = Vec::new();
        for i in 0..tuples.len() {
            for j in (i + 1)..tuples.len() {
                let mut rs = 1.0;
                for l in 0..2 {
                    rs *= embedding_inner(
                        &tuples[i].messages()[l],
                        &tuples[j].messages()[l],
                        sigma2[l],
                    )
                    .unwrap();
                }
                exact.push(selfs[i] - 2.0 * rs + selfs[j]);
            }
        }
        exact.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p01 = exact[exact.len() / 100];
        let p99 = exact[exact.len() * 99 / 100];
        let gamma2 = result.widths.gamma2;
        assert!(
            gamma2 >= p01 && gamma2 <= p99,
            "γ² = {gamma2} outside exact-distance percentile band [{p01}, {p99}]"
        );
    }

    #[test]
    fn large_batches_are_subsampled_not_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tuples: Vec<MessageTuple> = (0..620)
            .map(|_| {
                MessageTuple::single(
                    ExpFamMessage::gaussian(rng.gen::<f64>(), 0.5 + rng.gen::<f64>()).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let result = median_heuristic(&tuples, 30, 7).unwrap();
        assert!(result.widths.gamma2.is_finite() && result.widths.gamma2 > 0.0);
    }
}
