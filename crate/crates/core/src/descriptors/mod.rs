//! Descriptor representation and matching: exact brute-force search (the
//! oracle for everything else), Lowe-style ratio-test matching, and the
//! approximate nearest-neighbor index used by reconstruction and online
//! localization.

mod ann;

pub use ann::{AnnError, AnnIndex, AnnParams};

use thiserror::Error;

/// Default descriptor dimension.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 128;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DescriptorError {
    #[error("descriptor has zero norm")]
    ZeroNorm,
    #[error("descriptor component {index} is not finite")]
    NonFinite { index: usize },
    #[error("descriptor component {index} is negative ({value})")]
    Negative { index: usize, value: f32 },
}

/// Fixed-dimension visual feature vector with non-negative components,
/// stored unit-L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Box<[f32]>,
}

impl Descriptor {
    /// Builds a descriptor from non-negative finite components, normalizing
    /// to unit L2 norm.
    pub fn new(values: Vec<f32>) -> Result<Self, DescriptorError> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(DescriptorError::NonFinite { index });
            }
            if value < 0.0 {
                return Err(DescriptorError::Negative { index, value });
            }
        }
        Self::normalize(values)
    }

    /// Builds a descriptor from noisy components: negatives are clamped to
    /// zero before normalization. Generators that add Gaussian noise to a
    /// clean descriptor use this to stay inside the invariant.
    pub fn from_noisy(values: Vec<f32>) -> Result<Self, DescriptorError> {
        let mut values = values;
        for (index, value) in values.iter_mut().enumerate() {
            if !value.is_finite() {
                return Err(DescriptorError::NonFinite { index });
            }
            if *value < 0.0 {
                *value = 0.0;
            }
        }
        Self::normalize(values)
    }

    fn normalize(mut values: Vec<f32>) -> Result<Self, DescriptorError> {
        let norm_sq: f64 = values.iter().map(|&v| (v as f64) * (v as f64)).sum();
        if norm_sq <= f64::EPSILON {
            return Err(DescriptorError::ZeroNorm);
        }
        let inv = (1.0 / norm_sq.sqrt()) as f32;
        for v in values.iter_mut() {
            *v *= inv;
        }
        Ok(Self {
            values: values.into_boxed_slice(),
        })
    }

    /// Renormalized component-wise mean of a non-empty descriptor set.
    pub fn mean(descriptors: &[&Descriptor]) -> Result<Self, DescriptorError> {
        assert!(!descriptors.is_empty());
        let dim = descriptors[0].dim();
        let mut acc = vec![0.0f64; dim];
        for d in descriptors {
            debug_assert_eq!(d.dim(), dim);
            for (a, &v) in acc.iter_mut().zip(d.as_slice()) {
                *a += v as f64;
            }
        }
        let inv = 1.0 / descriptors.len() as f64;
        Self::normalize(acc.into_iter().map(|a| (a * inv) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

/// Squared L2 distance between two descriptors of the same dimension.
///
/// Squared distance is monotone with L2 and is the match distance everywhere
/// in this crate, including the reported `ratio` fields.
pub fn squared_distance(a: &Descriptor, b: &Descriptor) -> f32 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut acc = 0.0f32;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// A query-to-target pairing with its match quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    /// Index into the query set.
    pub query_index: usize,
    /// Index into the target set (or descriptor id for index queries).
    pub target_index: usize,
    /// Squared L2 distance.
    pub distance: f32,
    /// Best/second-best squared-distance ratio; 0 when the test was not
    /// applicable (k-NN output, or a singleton target set).
    pub ratio: f32,
}

/// Exact k-nearest neighbors of `query` in `database`, sorted ascending by
/// distance (ties broken by index). `k` is clamped to the database size.
///
/// This is the oracle every approximate search is tested against.
pub fn brute_force_knn(query: &Descriptor, database: &[Descriptor], k: usize) -> Vec<MatchPair> {
    let k = k.min(database.len());
    if k == 0 {
        return Vec::new();
    }
    let mut all: Vec<(f32, usize)> = database
        .iter()
        .enumerate()
        .map(|(i, d)| (squared_distance(query, d), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter()
        .map(|(distance, target_index)| MatchPair {
            query_index: 0,
            target_index,
            distance,
            ratio: 0.0,
        })
        .collect()
}

/// Ratio-test matching of every A-descriptor against set B.
///
/// For each A-descriptor the best B-neighbor is kept iff the
/// best/second-best squared-distance ratio is strictly below
/// `ratio_threshold`. A singleton B disables the test for that query (the
/// match is kept with ratio 0). The output is ordered ascending by distance.
pub fn ratio_test_match(
    set_a: &[Descriptor],
    set_b: &[Descriptor],
    ratio_threshold: f32,
) -> Vec<MatchPair> {
    debug_assert!(ratio_threshold > 0.0 && ratio_threshold < 1.0);
    let mut matches = Vec::new();
    if set_b.is_empty() {
        return matches;
    }
    for (query_index, a) in set_a.iter().enumerate() {
        let nn = brute_force_knn(a, set_b, 2);
        let best = nn[0];
        if nn.len() == 1 {
            matches.push(MatchPair {
                query_index,
                target_index: best.target_index,
                distance: best.distance,
                ratio: 0.0,
            });
            continue;
        }
        let second = nn[1].distance;
        let ratio = if second > 0.0 {
            best.distance / second
        } else {
            1.0
        };
        if ratio < ratio_threshold {
            matches.push(MatchPair {
                query_index,
                target_index: best.target_index,
                distance: best.distance,
                ratio,
            });
        }
    }
    matches.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.query_index.cmp(&b.query_index))
    });
    matches
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// SIFT-like synthetic descriptor: sparse non-negative components (about
    /// half the histogram bins of a real descriptor are near zero).
    pub(crate) fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Descriptor {
        loop {
            let values: Vec<f32> = (0..dim)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        0.0
                    } else {
                        rng.sample::<f64, _>(rand_distr::StandardNormal).abs() as f32
                    }
                })
                .collect();
            if let Ok(d) = Descriptor::new(values) {
                return d;
            }
        }
    }

    pub(crate) fn perturbed(rng: &mut ChaCha8Rng, base: &Descriptor, sigma: f32) -> Descriptor {
        let values: Vec<f32> = base
            .as_slice()
            .iter()
            .map(|&v| v + rng.sample::<f64, _>(rand_distr::StandardNormal) as f32 * sigma)
            .collect();
        Descriptor::from_noisy(values).unwrap()
    }

    #[test]
    fn constructor_normalizes_and_validates() {
        let d = Descriptor::new(vec![3.0, 4.0]).unwrap();
        assert!((d.as_slice()[0] - 0.6).abs() < 1e-6);
        assert!((d.as_slice()[1] - 0.8).abs() < 1e-6);
        assert!(Descriptor::new(vec![0.0, 0.0]).is_err());
        assert!(Descriptor::new(vec![-1.0, 1.0]).is_err());
        assert!(Descriptor::new(vec![f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn self_match_has_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let db: Vec<_> = (0..10).map(|_| random_descriptor(&mut rng, 16)).collect();
        let nn = brute_force_knn(&db[3].clone(), &db, 1);
        assert_eq!(nn[0].target_index, 3);
        assert_eq!(nn[0].distance, 0.0);
    }

    #[test]
    fn orthonormal_pair_distances() {
        let mut e0 = vec![0.0f32; 4];
        e0[0] = 1.0;
        let mut e1 = vec![0.0f32; 4];
        e1[1] = 1.0;
        let db = vec![Descriptor::new(e0).unwrap(), Descriptor::new(e1).unwrap()];
        let nn = brute_force_knn(&db[0].clone(), &db, 2);
        assert_eq!(nn[0].distance, 0.0);
        assert!((nn[1].distance - 2.0).abs() < 1e-6);
    }

    /// Independent exhaustive scan, written against the raw component data
    /// on purpose so it shares nothing with `brute_force_knn`'s path.
    fn exhaustive_oracle(query: &Descriptor, database: &[Descriptor], k: usize) -> Vec<(usize, f32)> {
        let mut scored: Vec<(usize, f32)> = Vec::new();
        for idx in 0..database.len() {
            // unit vectors: d^2 = 2 - 2 * dot
            let mut dot = 0.0f64;
            for j in 0..query.dim() {
                dot += query.as_slice()[j] as f64 * database[idx].as_slice()[j] as f64;
            }
            let d2 = (2.0 - 2.0 * dot).max(0.0) as f32;
            scored.push((idx, d2));
        }
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(k.min(database.len()));
        scored
    }

    #[test]
    fn knn_agrees_with_independent_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let db: Vec<_> = (0..1000).map(|_| random_descriptor(&mut rng, 32)).collect();
        for _ in 0..20 {
            let q = random_descriptor(&mut rng, 32);
            let got = brute_force_knn(&q, &db, 5);
            let want = exhaustive_oracle(&q, &db, 5);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.target_index, w.0);
                // the two formulas differ only by rounding
                assert!((g.distance - w.1).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn identical_singletons_match() {
        let d = Descriptor::new(vec![1.0, 2.0, 3.0]).unwrap();
        let m = ratio_test_match(&[d.clone()], &[d], 0.7);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].distance, 0.0);
        assert_eq!(m[0].ratio, 0.0);
    }

    #[test]
    fn equidistant_neighbors_are_rejected() {
        // query at 45 degrees between two orthonormal targets
        let q = Descriptor::new(vec![1.0, 1.0, 0.0]).unwrap();
        let b0 = Descriptor::new(vec![1.0, 0.0, 0.0]).unwrap();
        let b1 = Descriptor::new(vec![0.0, 1.0, 0.0]).unwrap();
        let m = ratio_test_match(&[q], &[b0, b1], 0.7);
        assert!(m.is_empty());
    }

    #[test]
    fn output_is_sorted_by_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bases: Vec<_> = (0..50).map(|_| random_descriptor(&mut rng, 64)).collect();
        let set_a: Vec<_> = bases.iter().map(|b| perturbed(&mut rng, b, 0.03)).collect();
        let m = ratio_test_match(&set_a, &bases, 0.7);
        assert!(m.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    /// Oracle = the generator's cluster identity: noisy copies of 100 bases
    /// must re-match their own base in at least 95 cases.
    #[test]
    fn cluster_identity_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bases: Vec<_> = (0..100)
            .map(|_| random_descriptor(&mut rng, DEFAULT_DESCRIPTOR_DIM))
            .collect();
        let set_b: Vec<_> = bases.iter().map(|b| perturbed(&mut rng, b, 0.05)).collect();
        let set_a: Vec<_> = bases.iter().map(|b| perturbed(&mut rng, b, 0.05)).collect();
        let m = ratio_test_match(&set_a, &set_b, 0.7);
        let correct = m.iter().filter(|p| p.query_index == p.target_index).count();
        assert!(correct >= 95, "only {correct} correct pairings");
    }

    #[test]
    fn mean_of_orthonormal_pair() {
        let mut e0 = vec![0.0f32; 8];
        e0[0] = 1.0;
        let mut e1 = vec![0.0f32; 8];
        e1[1] = 1.0;
        let a = Descriptor::new(e0).unwrap();
        let b = Descriptor::new(e1).unwrap();
        let m = Descriptor::mean(&[&a, &b]).unwrap();
        let inv_sqrt2 = 1.0 / 2.0f32.sqrt();
        assert!((m.as_slice()[0] - inv_sqrt2).abs() < 1e-6);
        assert!((m.as_slice()[1] - inv_sqrt2).abs() < 1e-6);
        assert!(m.as_slice()[2..].iter().all(|&v| v == 0.0));

        let same = Descriptor::mean(&[&a, &a]).unwrap();
        assert_eq!(same, a);
    }
}
