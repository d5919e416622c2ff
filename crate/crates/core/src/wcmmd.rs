//! Weighted conditional MMD estimators and the variance-based importance.
//!
//! For a feature value `x` of column `m`, the squared MMD between the
//! conditional potential outcome distributions is estimated from observed
//! data by reweighting rows twice: inverse probability weights remove
//! confounding, and conditioning weights concentrate mass on rows whose
//! `m`-th feature is (near) `x` — an indicator average for discrete columns,
//! Nadaraya-Watson smoothing for continuous ones. The importance of the
//! feature is the sample variance of that squared MMD across the observed
//! feature values.
//!
//! Two evaluation routes are provided. The exact route expands the full
//! double sum over the outcome kernel, `O(n^2)` per conditioning point. The
//! random-Fourier route represents each outcome by a finite feature vector
//! and reduces a conditioning point to a weighted average in that space,
//! `O(rn)` per point. Evaluating the whole per-point curve batches both
//! routes into dense matrix products.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::kernels::{gaussian_unchecked, median_heuristic, Bandwidth, RffMap};
use crate::propensity::IpWeights;
use crate::{Error, Result};

/// Round-off guard: squared-MMD values in `[-NEGATIVE_TOLERANCE, 0)` are
/// clamped to zero; anything lower would indicate a broken invariant.
pub const NEGATIVE_TOLERANCE: f64 = 1e-10;

#[inline]
fn clamp_d2(v: f64) -> f64 {
    debug_assert!(v >= -NEGATIVE_TOLERANCE, "squared MMD fell to {v}");
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Row weights conditioning on `feature == at`, one pair per sample row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalWeights {
    pub feature: usize,
    pub at: f64,
    pub omega0: Vec<f64>,
    pub omega1: Vec<f64>,
}

fn check_feature(dataset: &Dataset, m: usize) -> Result<()> {
    if m >= dataset.d() {
        return Err(Error::DimensionMismatch {
            expected: dataset.d(),
            got: m,
        });
    }
    Ok(())
}

fn check_ipw(dataset: &Dataset, ipw: &IpWeights) -> Result<()> {
    if ipw.len() != dataset.n() {
        return Err(Error::DimensionMismatch {
            expected: dataset.n(),
            got: ipw.len(),
        });
    }
    Ok(())
}

/// Conditioning weights for a discrete feature: the inverse probability
/// weight of each row in the stratum `x_{m,i} = x`, divided by the stratum
/// size; zero outside the stratum.
pub fn conditional_weights_discrete(
    dataset: &Dataset,
    m: usize,
    x: f64,
    ipw: &IpWeights,
) -> Result<ConditionalWeights> {
    check_feature(dataset, m)?;
    check_ipw(dataset, ipw)?;
    let col = dataset.feature_column(m);
    let count = col.iter().filter(|&&v| v == x).count();
    if count == 0 {
        return Err(Error::EmptyStratum { feature: m, value: x });
    }
    let inv = 1.0 / count as f64;
    let mut omega0 = vec![0.0; dataset.n()];
    let mut omega1 = vec![0.0; dataset.n()];
    for (i, &v) in col.iter().enumerate() {
        if v == x {
            omega0[i] = inv * ipw.w0[i];
            omega1[i] = inv * ipw.w1[i];
        }
    }
    Ok(ConditionalWeights {
        feature: m,
        at: x,
        omega0,
        omega1,
    })
}

/// Conditioning weights for a continuous feature: Nadaraya-Watson weights
/// under a Gaussian kernel on column `m`, times the inverse probability
/// weights. The kernel never vanishes, so the normalizer is positive.
pub fn conditional_weights_continuous(
    dataset: &Dataset,
    m: usize,
    x: f64,
    ipw: &IpWeights,
    h: Bandwidth,
) -> Result<ConditionalWeights> {
    check_feature(dataset, m)?;
    check_ipw(dataset, ipw)?;
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("conditioning value {x}")));
    }
    let col = dataset.feature_column(m);
    let hv = h.value();
    let kernels: Vec<f64> = col
        .iter()
        .map(|&v| gaussian_unchecked(v, x, hv))
        .collect();
    let total: f64 = kernels.iter().sum();
    let mut omega0 = vec![0.0; dataset.n()];
    let mut omega1 = vec![0.0; dataset.n()];
    for (i, &k) in kernels.iter().enumerate() {
        let nw = k / total;
        omega0[i] = nw * ipw.w0[i];
        omega1[i] = nw * ipw.w1[i];
    }
    Ok(ConditionalWeights {
        feature: m,
        at: x,
        omega0,
        omega1,
    })
}

/// Exact weighted squared MMD: the double sum
/// `sum_ij (w0_i w0_j + w1_i w1_j - 2 w0_i w1_j) k(y_i, y_j)`,
/// evaluated over the rows with nonzero weight.
pub fn d2_exact(dataset: &Dataset, weights: &ConditionalWeights, h_y: Bandwidth) -> f64 {
    let y = dataset.outcome();
    let hv = h_y.value();
    // one of omega0/omega1 is zero per row, so the difference carries both
    let active: Vec<(f64, f64)> = weights
        .omega0
        .iter()
        .zip(&weights.omega1)
        .zip(y)
        .filter(|((&w0, &w1), _)| w0 != 0.0 || w1 != 0.0)
        .map(|((&w0, &w1), &yi)| (w0 - w1, yi))
        .collect();
    let mut acc = 0.0;
    for (i, &(di, yi)) in active.iter().enumerate() {
        acc += di * di; // k(y_i, y_i) = 1
        for &(dj, yj) in &active[i + 1..] {
            acc += 2.0 * di * dj * gaussian_unchecked(yi, yj, hv);
        }
    }
    clamp_d2(acc)
}

/// Random-Fourier approximation of [`d2_exact`]: the squared norm of the
/// difference between the weighted feature-vector averages of each arm.
pub fn d2_rff(dataset: &Dataset, weights: &ConditionalWeights, map: &RffMap) -> f64 {
    let y = dataset.outcome();
    let mut diff = vec![0.0; map.r()];
    let mut z = vec![0.0; map.r()];
    for (i, (&w0, &w1)) in weights.omega0.iter().zip(&weights.omega1).enumerate() {
        if w0 == 0.0 && w1 == 0.0 {
            continue;
        }
        let d = w0 - w1;
        map.features_into(y[i], &mut z);
        for (acc, &zi) in diff.iter_mut().zip(&z) {
            *acc += d * zi;
        }
    }
    diff.iter().map(|v| v * v).sum()
}

/// Kernel bandwidths for one dataset: the outcome bandwidth and one
/// bandwidth per continuous feature column, all from the median heuristic.
/// Columns without a usable bandwidth (discrete, or effectively constant)
/// hold `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h_y: Bandwidth,
    pub h_x: Vec<Option<Bandwidth>>,
}

impl Bandwidths {
    /// Median-heuristic bandwidths with a pairwise-subsample cap.
    pub fn from_dataset(dataset: &Dataset, cap: usize) -> Result<Self> {
        let h_y = median_heuristic(dataset.outcome(), cap)?;
        let mut h_x = Vec::with_capacity(dataset.d());
        for m in 0..dataset.d() {
            if dataset.kind(m).is_discrete() {
                h_x.push(None);
            } else {
                match median_heuristic(&dataset.feature_column(m), cap) {
                    Ok(h) => h_x.push(Some(h)),
                    Err(Error::ZeroMedian) => h_x.push(None),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self { h_y, h_x })
    }
}

/// How the per-point squared MMD is evaluated.
#[derive(Debug, Clone)]
pub enum Mode {
    /// Full double sum over the outcome kernel; `O(n^3)` for a whole curve.
    Exact,
    /// Random Fourier features; `O(r n^2)` for a whole curve.
    Rff(RffMap),
}

/// Configuration for [`importance`].
#[derive(Debug, Clone)]
pub struct ImportanceConfig {
    pub mode: Mode,
    pub bandwidths: Bandwidths,
    /// Exact mode materializes three `n x n` matrices; refuse beyond this.
    pub gram_cap_bytes: usize,
}

impl ImportanceConfig {
    pub const DEFAULT_GRAM_CAP: usize = 2 << 30;

    pub fn new(mode: Mode, bandwidths: Bandwidths) -> Self {
        Self {
            mode,
            bandwidths,
            gram_cap_bytes: Self::DEFAULT_GRAM_CAP,
        }
    }
}

/// Precomputed per-run state shared by every curve evaluation: the outcome
/// side of the estimator does not depend on the conditioning feature or on
/// resampled feature columns, so pipelines build it once and reuse it across
/// features and randomization-test replicates.
#[derive(Debug, Clone)]
pub enum CurveCache {
    /// Feature matrix with rows `z(y_i)` for rff mode.
    Rff { features: Array2<f64> },
    /// Outcome Gram matrix for exact mode when any continuous column exists
    /// (discrete strata work from raw outcomes).
    Exact { gram: Option<Array2<f64>> },
}

impl CurveCache {
    /// Build the cache for an `(outcome, mode)` pair. The cache is only
    /// valid for datasets sharing that outcome column; feature columns and
    /// weights enter later, per evaluation.
    pub fn build(dataset: &Dataset, config: &ImportanceConfig) -> Result<Self> {
        match &config.mode {
            Mode::Rff(map) => Ok(CurveCache::Rff {
                features: map.feature_matrix(dataset.outcome()),
            }),
            Mode::Exact => {
                let gram = if dataset.kinds().iter().any(|k| !k.is_discrete()) {
                    let n = dataset.n();
                    let need = 3usize.saturating_mul(8 * n * n);
                    if need > config.gram_cap_bytes {
                        return Err(Error::ExactModeTooLarge {
                            n,
                            cap_bytes: config.gram_cap_bytes,
                        });
                    }
                    Some(outcome_gram(dataset.outcome(), config.bandwidths.h_y))
                } else {
                    None
                };
                Ok(CurveCache::Exact { gram })
            }
        }
    }
}

/// The per-point squared MMD curve of one feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmdCurve {
    pub feature: usize,
    /// `(x_{m,i}, D2_m(x_{m,i}))`, one point per sample row.
    pub points: Vec<(f64, f64)>,
}

/// A feature's importance: the sample variance of its squared-MMD curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceResult {
    pub feature: usize,
    pub importance: f64,
    pub curve: MmdCurve,
    /// Set when the feature column has a single observed value; the
    /// importance is zero by construction then.
    pub degenerate: bool,
}

/// Estimate the importance of feature `m`: evaluate the squared MMD at every
/// observed value of the column and take the sample variance (with `n - 1`
/// normalization) of those `n` values.
pub fn importance(
    dataset: &Dataset,
    m: usize,
    ipw: &IpWeights,
    config: &ImportanceConfig,
) -> Result<ImportanceResult> {
    let cache = CurveCache::build(dataset, config)?;
    importance_cached(dataset, m, ipw, config, &cache)
}

/// As [`importance`], reusing a prebuilt [`CurveCache`]. The cache must have
/// been built from a dataset with the same outcome column and from the same
/// weights and mode; feature columns may differ.
pub fn importance_cached(
    dataset: &Dataset,
    m: usize,
    ipw: &IpWeights,
    config: &ImportanceConfig,
    cache: &CurveCache,
) -> Result<ImportanceResult> {
    check_feature(dataset, m)?;
    check_ipw(dataset, ipw)?;
    match (&config.mode, cache) {
        (Mode::Exact, CurveCache::Exact { .. }) => {}
        (Mode::Rff(map), CurveCache::Rff { features }) if map.r() == features.ncols() => {}
        _ => {
            return Err(Error::InvalidParameter(
                "curve cache does not match the configured mode".into(),
            ))
        }
    }
    let col = dataset.feature_column(m);
    let n = dataset.n();
    let dw: Vec<f64> = ipw.w0.iter().zip(&ipw.w1).map(|(w0, w1)| w0 - w1).collect();

    let distinct = {
        let mut values = col.clone();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        values
    };
    if distinct.len() == 1 {
        let all: Vec<usize> = (0..n).collect();
        let value = stratum_d2(dataset, config.bandwidths.h_y, &all, &dw, cache);
        log::warn!("feature {m} has a single observed value; importance is 0");
        return Ok(ImportanceResult {
            feature: m,
            importance: 0.0,
            curve: MmdCurve {
                feature: m,
                points: col.iter().map(|&x| (x, value)).collect(),
            },
            degenerate: true,
        });
    }

    let values = if dataset.kind(m).is_discrete() {
        // one evaluation per observed level, broadcast back to rows
        let mut per_level = Vec::with_capacity(distinct.len());
        for &level in &distinct {
            let idx: Vec<usize> = (0..n).filter(|&i| col[i] == level).collect();
            per_level.push((
                level,
                stratum_d2(dataset, config.bandwidths.h_y, &idx, &dw, cache),
            ));
        }
        col.iter()
            .map(|&x| {
                per_level
                    .iter()
                    .find(|(level, _)| *level == x)
                    .map(|&(_, v)| v)
                    .expect("level observed")
            })
            .collect::<Vec<f64>>()
    } else {
        let h_m = config.bandwidths.h_x[m].ok_or_else(|| {
            Error::InvalidParameter(format!(
                "no bandwidth for continuous feature {m}; median heuristic failed"
            ))
        })?;
        match cache {
            CurveCache::Exact { gram } => {
                let gram = gram.as_ref().ok_or_else(|| {
                    Error::InvalidParameter(
                        "exact cache built without a Gram matrix used on a continuous column"
                            .into(),
                    )
                })?;
                let (mut km, s) = feature_kernel_matrix(&col, h_m);
                scale_columns(&mut km, &dw);
                let t = km.dot(gram);
                (0..n)
                    .map(|i| {
                        let quad = t.row(i).dot(&km.row(i));
                        clamp_d2(quad / (s[i] * s[i]))
                    })
                    .collect()
            }
            CurveCache::Rff { features } => {
                let (mut km, s) = feature_kernel_matrix(&col, h_m);
                scale_columns(&mut km, &dw);
                let p = km.dot(features);
                (0..n)
                    .map(|i| {
                        let norm2 = p.row(i).dot(&p.row(i));
                        clamp_d2(norm2 / (s[i] * s[i]))
                    })
                    .collect()
            }
        }
    };

    let importance = sample_variance(&values);
    Ok(ImportanceResult {
        feature: m,
        importance,
        curve: MmdCurve {
            feature: m,
            points: col.into_iter().zip(values).collect(),
        },
        degenerate: false,
    })
}

/// Mean-comparison analogue of [`importance`]: the sample variance across
/// conditioning points of the difference between the weighted outcome means
/// of the two arms. Detects mean shifts only; blind to variance effects.
pub fn cate_variance_statistic(
    dataset: &Dataset,
    m: usize,
    ipw: &IpWeights,
    bandwidths: &Bandwidths,
) -> Result<f64> {
    check_feature(dataset, m)?;
    check_ipw(dataset, ipw)?;
    let col = dataset.feature_column(m);
    let n = dataset.n();
    // per-row signed contribution to (weighted treated mean - untreated mean)
    let c: Vec<f64> = ipw
        .w1
        .iter()
        .zip(&ipw.w0)
        .zip(dataset.outcome())
        .map(|((w1, w0), y)| (w1 - w0) * y)
        .collect();

    let mut distinct = col.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() == 1 {
        return Ok(0.0);
    }

    let values: Vec<f64> = if dataset.kind(m).is_discrete() {
        let mut per_level = Vec::with_capacity(distinct.len());
        for &level in &distinct {
            let idx: Vec<usize> = (0..n).filter(|&i| col[i] == level).collect();
            let t = idx.iter().map(|&i| c[i]).sum::<f64>() / idx.len() as f64;
            per_level.push((level, t));
        }
        col.iter()
            .map(|&x| {
                per_level
                    .iter()
                    .find(|(level, _)| *level == x)
                    .map(|&(_, v)| v)
                    .expect("level observed")
            })
            .collect()
    } else {
        let h_m = bandwidths.h_x[m].ok_or_else(|| {
            Error::InvalidParameter(format!(
                "no bandwidth for continuous feature {m}; median heuristic failed"
            ))
        })?;
        let (km, s) = feature_kernel_matrix(&col, h_m);
        let num = km.dot(&Array1::from_vec(c));
        num.iter().zip(&s).map(|(v, si)| v / si).collect()
    };

    Ok(sample_variance(&values))
}

/// Squared MMD of the stratum-average weighting: the discrete-feature
/// conditional weights are `(w0_i - w1_i) / |stratum|` on the stratum rows.
fn stratum_d2(dataset: &Dataset, h_y: Bandwidth, idx: &[usize], cache: &CurveCache) -> f64 {
    let inv = 1.0 / idx.len() as f64;
    match cache {
        CurveCache::Rff { weighted_features } => {
            let r = weighted_features.ncols();
            let mut acc = vec![0.0; r];
            for &i in idx {
                for (a, &u) in acc.iter_mut().zip(weighted_features.row(i)) {
                    *a += u;
                }
            }
            acc.iter().map(|v| (v * inv) * (v * inv)).sum()
        }
        CurveCache::Exact { dw, .. } => {
            let y = dataset.outcome();
            let hv = h_y.value();
            let mut acc = 0.0;
            for (pos, &i) in idx.iter().enumerate() {
                acc += dw[i] * dw[i];
                for &j in &idx[pos + 1..] {
                    acc += 2.0 * dw[i] * dw[j] * gaussian_unchecked(y[i], y[j], hv);
                }
            }
            clamp_d2(acc * inv * inv)
        }
    }
}

/// Symmetric Gaussian kernel matrix of a feature column and its row sums.
fn feature_kernel_matrix(col: &[f64], h: Bandwidth) -> (Array2<f64>, Vec<f64>) {
    let n = col.len();
    let hv = h.value();
    let mut km = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        km[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let k = gaussian_unchecked(col[i], col[j], hv);
            km[[i, j]] = k;
            km[[j, i]] = k;
        }
    }
    let s: Vec<f64> = km.rows().into_iter().map(|row| row.sum()).collect();
    (km, s)
}

fn outcome_gram(y: &[f64], h: Bandwidth) -> Array2<f64> {
    let n = y.len();
    let hv = h.value();
    let mut gram = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        gram[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let k = gaussian_unchecked(y[i], y[j], hv);
            gram[[i, j]] = k;
            gram[[j, i]] = k;
        }
    }
    gram
}

fn scale_columns(m: &mut Array2<f64>, by: &[f64]) {
    for mut row in m.outer_iter_mut() {
        for (v, &d) in row.iter_mut().zip(by) {
            *v *= d;
        }
    }
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    debug_assert!(n >= 2);
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, ColumnKind, Scenario, ScenarioKind};
    use crate::kernels::make_rff;
    use crate::propensity::oracle_weights;
    use crate::rng::rng_from;
    use ndarray::Array2;
    use rand::Rng;

    fn two_row_dataset() -> Dataset {
        let features = Array2::from_shape_vec((2, 1), vec![0.0, 0.0]).unwrap();
        Dataset::new(
            vec!["x".into()],
            vec![ColumnKind::Continuous],
            features,
            vec![0, 1],
            vec![0.0, 1.0],
        )
        .unwrap()
    }

    fn random_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from(seed);
        let features = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
        let treatment: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
        let outcome: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        Dataset::new(
            vec!["x1".into(), "x2".into()],
            vec![ColumnKind::Continuous; 2],
            features,
            treatment,
            outcome,
        )
        .unwrap()
    }

    /// The quoted three-term double sum, looped naively.
    fn d2_brute_force(y: &[f64], w: &ConditionalWeights, h: f64) -> f64 {
        let n = y.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let k = gaussian_unchecked(y[i], y[j], h);
                acc += (w.omega0[i] * w.omega0[j] + w.omega1[i] * w.omega1[j]) * k;
                acc -= 2.0 * w.omega0[i] * w.omega1[j] * k;
            }
        }
        acc
    }

    #[test]
    fn discrete_weights_hand_example() {
        let features = Array2::from_shape_vec((4, 1), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let ds = Dataset::new(
            vec!["x".into()],
            vec![ColumnKind::Discrete { levels: vec![0.0, 1.0] }],
            features,
            vec![1, 1, 0, 0],
            vec![0.0; 4],
        )
        .unwrap();
        let ipw = IpWeights {
            w0: vec![0.0, 0.0, 2.0, 2.0],
            w1: vec![2.0, 2.0, 0.0, 0.0],
        };
        let w = conditional_weights_discrete(&ds, 0, 1.0, &ipw).unwrap();
        assert_eq!(w.omega1, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(w.omega0, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn discrete_weights_full_match_reduce_to_ipw_over_n() {
        let features = Array2::from_shape_vec((3, 1), vec![2.0, 2.0, 2.0]).unwrap();
        let ds = Dataset::new(
            vec!["x".into()],
            vec![ColumnKind::Discrete { levels: vec![2.0] }],
            features,
            vec![1, 0, 1],
            vec![0.0; 3],
        )
        .unwrap();
        let ipw = IpWeights {
            w0: vec![0.0, 2.0, 0.0],
            w1: vec![2.0, 0.0, 2.0],
        };
        let w = conditional_weights_discrete(&ds, 0, 2.0, &ipw).unwrap();
        for i in 0..3 {
            assert_eq!(w.omega0[i], ipw.w0[i] / 3.0);
            assert_eq!(w.omega1[i], ipw.w1[i] / 3.0);
        }
        assert!(matches!(
            conditional_weights_discrete(&ds, 0, 5.0, &ipw),
            Err(Error::EmptyStratum { .. })
        ));
    }

    #[test]
    fn continuous_weights_flat_kernel_limit() {
        let ds = random_dataset(40, 3);
        let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
        let h = Bandwidth::new(1e6).unwrap();
        let w = conditional_weights_continuous(&ds, 0, 0.3, &ipw, h).unwrap();
        for i in 0..ds.n() {
            assert!((w.omega0[i] - ipw.w0[i] / 40.0).abs() < 1e-6);
            assert!((w.omega1[i] - ipw.w1[i] / 40.0).abs() < 1e-6);
        }
    }

    #[test]
    fn continuous_weights_far_point_is_negligible() {
        let features = Array2::from_shape_vec((2, 1), vec![0.0, 100.0]).unwrap();
        let ds = Dataset::new(
            vec!["x".into()],
            vec![ColumnKind::Continuous],
            features,
            vec![1, 1],
            vec![0.0, 1.0],
        )
        .unwrap();
        let ipw = IpWeights {
            w0: vec![0.0, 0.0],
            w1: vec![2.0, 2.0],
        };
        let h = Bandwidth::new(1.0).unwrap();
        let w = conditional_weights_continuous(&ds, 0, 0.0, &ipw, h).unwrap();
        assert!(w.omega1[1] < 1e-40 * w.omega1[0]);
    }

    #[test]
    fn continuous_weights_scale_linearly_in_ipw() {
        let ds = random_dataset(25, 9);
        let ipw = oracle_weights(&ds, |_| 0.4, 0.01).unwrap();
        let doubled = IpWeights {
            w0: ipw.w0.iter().map(|w| 2.0 * w).collect(),
            w1: ipw.w1.iter().map(|w| 2.0 * w).collect(),
        };
        let h = Bandwidth::new(0.8).unwrap();
        let a = conditional_weights_continuous(&ds, 1, 0.1, &ipw, h).unwrap();
        let b = conditional_weights_continuous(&ds, 1, 0.1, &doubled, h).unwrap();
        for i in 0..ds.n() {
            assert!((b.omega0[i] - 2.0 * a.omega0[i]).abs() < 1e-14);
            assert!((b.omega1[i] - 2.0 * a.omega1[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn d2_exact_two_point_hand_value() {
        let ds = two_row_dataset();
        let w = ConditionalWeights {
            feature: 0,
            at: 0.0,
            omega0: vec![1.0, 0.0],
            omega1: vec![0.0, 1.0],
        };
        let h = Bandwidth::new(1.0).unwrap();
        let expected = 2.0 - 2.0 * (-1.0f64).exp(); // 1.264241...
        assert!((d2_exact(&ds, &w, h) - expected).abs() < 1e-12);
    }

    #[test]
    fn d2_vanishes_for_equal_weight_vectors() {
        let ds = two_row_dataset();
        let w = ConditionalWeights {
            feature: 0,
            at: 0.0,
            omega0: vec![0.5, 0.5],
            omega1: vec![0.5, 0.5],
        };
        let h = Bandwidth::new(1.0).unwrap();
        assert_eq!(d2_exact(&ds, &w, h), 0.0);
        let map = make_rff(h, 64, 5).unwrap();
        assert_eq!(d2_rff(&ds, &w, &map), 0.0);
    }

    #[test]
    fn d2_exact_matches_brute_force_on_small_inputs() {
        let h = Bandwidth::new(0.9).unwrap();
        let mut rng = rng_from(17);
        for n in 2..=12 {
            let ds = random_dataset(n, 100 + n as u64);
            let e: f64 = rng.random_range(0.2..0.8);
            let ipw = oracle_weights(&ds, |_| e, 0.01).unwrap();
            let w = conditional_weights_continuous(
                &ds,
                0,
                rng.random_range(-1.0..1.0),
                &ipw,
                Bandwidth::new(0.7).unwrap(),
            )
            .unwrap();
            let fast = d2_exact(&ds, &w, h);
            let brute = d2_brute_force(ds.outcome(), &w, h.value());
            assert!((fast - brute).abs() < 1e-12, "n={n}: {fast} vs {brute}");
        }
    }

    #[test]
    fn d2_rff_tracks_exact_on_two_point_fixture() {
        let ds = two_row_dataset();
        let w = ConditionalWeights {
            feature: 0,
            at: 0.0,
            omega0: vec![1.0, 0.0],
            omega1: vec![0.0, 1.0],
        };
        let h = Bandwidth::new(1.0).unwrap();
        let map = make_rff(h, 20_000, 8).unwrap();
        let approx = d2_rff(&ds, &w, &map);
        assert!((approx - 1.264241).abs() < 0.05, "approx {approx}");
    }

    #[test]
    fn d2_is_nonnegative_for_random_weightings() {
        let ds = random_dataset(30, 77);
        let h = Bandwidth::new(1.1).unwrap();
        let map = make_rff(h, 256, 3).unwrap();
        let mut rng = rng_from(4);
        for _ in 0..50 {
            let omega0: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..0.4)).collect();
            let omega1: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..0.4)).collect();
            let w = ConditionalWeights {
                feature: 0,
                at: 0.0,
                omega0,
                omega1,
            };
            assert!(d2_exact(&ds, &w, h) >= 0.0);
            assert!(d2_rff(&ds, &w, &map) >= 0.0);
        }
    }

    #[test]
    fn importance_of_constant_feature_is_zero_with_flag() {
        let features = Array2::from_shape_vec((20, 2), {
            let mut v = Vec::new();
            let mut rng = rng_from(6);
            for _ in 0..20 {
                v.push(1.5);
                v.push(rng.random_range(-1.0..1.0));
            }
            v
        })
        .unwrap();
        let mut rng = rng_from(7);
        let ds = Dataset::new(
            vec!["c".into(), "x".into()],
            vec![ColumnKind::Continuous; 2],
            features,
            (0..20).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect(),
            (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
        let bw = Bandwidths::from_dataset(&ds, 2000).unwrap();
        let cfg = ImportanceConfig::new(Mode::Exact, bw);
        let res = importance(&ds, 0, &ipw, &cfg).unwrap();
        assert_eq!(res.importance, 0.0);
        assert!(res.degenerate);
        assert_eq!(res.curve.points.len(), 20);
    }

    #[test]
    fn importance_curves_match_single_point_ops() {
        // the batched matrix route must agree with the one-point estimators
        let ds = random_dataset(60, 21);
        let ipw = oracle_weights(&ds, |x| 0.5 + 0.1 * x[0].tanh(), 0.01).unwrap();
        let bw = Bandwidths::from_dataset(&ds, 2000).unwrap();
        let h_m = bw.h_x[0].unwrap();
        let h_y = bw.h_y;

        let exact_cfg = ImportanceConfig::new(Mode::Exact, bw.clone());
        let res = importance(&ds, 0, &ipw, &exact_cfg).unwrap();
        for &(x, v) in res.curve.points.iter().step_by(7) {
            let w = conditional_weights_continuous(&ds, 0, x, &ipw, h_m).unwrap();
            let single = d2_exact(&ds, &w, h_y);
            assert!((v - single).abs() < 1e-10, "exact: {v} vs {single}");
        }

        let map = make_rff(h_y, 128, 11).unwrap();
        let rff_cfg = ImportanceConfig::new(Mode::Rff(map.clone()), bw);
        let res = importance(&ds, 0, &ipw, &rff_cfg).unwrap();
        for &(x, v) in res.curve.points.iter().step_by(7) {
            let w = conditional_weights_continuous(&ds, 0, x, &ipw, h_m).unwrap();
            let single = d2_rff(&ds, &w, &map);
            assert!((v - single).abs() < 1e-10, "rff: {v} vs {single}");
        }
    }

    #[test]
    fn discrete_importance_matches_single_point_ops() {
        let mut rng = rng_from(31);
        let n = 80;
        let features = Array2::from_shape_fn((n, 1), |_| f64::from(rng.random_range(0..3u8)));
        let ds = Dataset::new(
            vec!["x".into()],
            vec![ColumnKind::Discrete { levels: vec![0.0, 1.0, 2.0] }],
            features,
            (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect(),
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
        let bw = Bandwidths::from_dataset(&ds, 2000).unwrap();
        let cfg = ImportanceConfig::new(Mode::Exact, bw.clone());
        let res = importance(&ds, 0, &ipw, &cfg).unwrap();
        for &(x, v) in res.curve.points.iter().step_by(11) {
            let w = conditional_weights_discrete(&ds, 0, x, &ipw).unwrap();
            let single = d2_exact(&ds, &w, bw.h_y);
            assert!((v - single).abs() < 1e-12);
        }
    }

    #[test]
    fn rff_importance_approaches_exact_importance() {
        let sc = Scenario::new(ScenarioKind::LinVar).with_d(6);
        let ds = generate_synthetic(&sc, 150, 19).unwrap();
        let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
        let bw = Bandwidths::from_dataset(&ds, 2000).unwrap();
        let exact = importance(&ds, 0, &ipw, &ImportanceConfig::new(Mode::Exact, bw.clone()))
            .unwrap()
            .importance;
        let map = make_rff(bw.h_y, 8000, 2).unwrap();
        let approx = importance(&ds, 0, &ipw, &ImportanceConfig::new(Mode::Rff(map), bw))
            .unwrap()
            .importance;
        let rel = (approx - exact).abs() / exact.max(1e-6);
        assert!(rel < 0.1, "exact {exact} rff {approx} rel {rel}");
    }

    #[test]
    fn exact_mode_respects_gram_cap() {
        let ds = random_dataset(64, 40);
        let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
        let bw = Bandwidths::from_dataset(&ds, 2000).unwrap();
        let mut cfg = ImportanceConfig::new(Mode::Exact, bw);
        cfg.gram_cap_bytes = 1024;
        assert!(matches!(
            importance(&ds, 0, &ipw, &cfg),
            Err(Error::ExactModeTooLarge { .. })
        ));
    }

    #[test]
    fn cate_statistic_zero_for_constant_feature() {
        let ds = {
            let mut rng = rng_from(51);
            let features = Array2::from_shape_fn((30, 1), |_| 2.0);
            Dataset::new(
                vec!["x".into()],
                vec![ColumnKind::Continuous],
                features,
                (0..30).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect(),
                (0..30).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
        let bw = Bandwidths {
            h_y: Bandwidth::new(1.0).unwrap(),
            h_x: vec![None],
        };
        assert_eq!(cate_variance_statistic(&ds, 0, &ipw, &bw).unwrap(), 0.0);
    }

    #[test]
    fn cate_statistic_ranks_mean_modifier_above_noise() {
        let mut wins = 0;
        for seed in 0..10 {
            let sc = Scenario::new(ScenarioKind::LinMean).with_d(12);
            let ds = generate_synthetic(&sc, 2000, 400 + seed).unwrap();
            let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
            let bw = Bandwidths::from_dataset(&ds, 2000).unwrap();
            let relevant = cate_variance_statistic(&ds, 0, &ipw, &bw).unwrap();
            let irrelevant = cate_variance_statistic(&ds, 9, &ipw, &bw).unwrap();
            if relevant > irrelevant {
                wins += 1;
            }
        }
        assert!(wins >= 9, "relevant feature won only {wins}/10 runs");
    }
}
