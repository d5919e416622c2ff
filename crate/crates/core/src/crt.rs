//! Conditional randomization tests.
//!
//! To test whether feature `m` matters, its column is replaced by draws from
//! a model of `X_m | X_-m` fitted to the data (never looking at treatment or
//! outcome), the test statistic is recomputed on each synthetic dataset, and
//! the p-value is the fraction of resampled statistics at least as large as
//! the observed one. When the fitted conditional matches the true one, the
//! resampled and observed columns are exchangeable and the p-value is valid
//! by construction.
//!
//! Three sampler families cover the data model: a linear-Gaussian
//! conditional for continuous columns, a multinomial logistic model for
//! discrete columns, and a context-free bootstrap of the marginal
//! distribution (the deliberately naive baseline).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnKind, Dataset};
use crate::linalg::solve_spd;
use crate::rng::{derive_seed_indexed, rng_from};
use crate::{Error, Result};

/// Sampler families for `X_m | X_-m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Least-squares linear conditional mean with Gaussian residual noise.
    GaussianLinear,
    /// Multinomial logistic regression over the column's declared levels.
    DiscreteMultinomial,
    /// Bootstrap of the observed column, ignoring the other features.
    MarginalNaive,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian-linear" => Ok(SamplerKind::GaussianLinear),
            "discrete-multinomial" => Ok(SamplerKind::DiscreteMultinomial),
            "marginal-naive" | "naive" => Ok(SamplerKind::MarginalNaive),
            other => Err(Error::InvalidParameter(format!(
                "unknown sampler kind {other:?}"
            ))),
        }
    }
}

/// A fitted conditional model for one feature column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ConditionalSampler {
    GaussianLinear {
        target: usize,
        /// Regressor columns in canonical (name-sorted) order.
        regressors: Vec<usize>,
        intercept: f64,
        coefficients: Vec<f64>,
        noise_sd: f64,
        /// Set when the normal equations needed a ridge to become solvable.
        ridged: bool,
    },
    DiscreteMultinomial {
        target: usize,
        regressors: Vec<usize>,
        levels: Vec<f64>,
        /// Per-class intercepts and weights; class 0 is the zero baseline.
        intercepts: Vec<f64>,
        coefficients: Array2<f64>,
    },
    MarginalNaive { target: usize, values: Vec<f64> },
}

impl ConditionalSampler {
    pub fn target(&self) -> usize {
        match self {
            ConditionalSampler::GaussianLinear { target, .. }
            | ConditionalSampler::DiscreteMultinomial { target, .. }
            | ConditionalSampler::MarginalNaive { target, .. } => *target,
        }
    }

    /// Directly assemble a linear-Gaussian sampler (for tests and for
    /// plugging in externally fitted conditionals).
    pub fn gaussian_linear(
        target: usize,
        regressors: Vec<usize>,
        intercept: f64,
        coefficients: Vec<f64>,
        noise_sd: f64,
    ) -> Result<Self> {
        if coefficients.len() != regressors.len() {
            return Err(Error::DimensionMismatch {
                expected: regressors.len(),
                got: coefficients.len(),
            });
        }
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise sd must be finite and nonnegative, got {noise_sd}"
            )));
        }
        Ok(ConditionalSampler::GaussianLinear {
            target,
            regressors,
            intercept,
            coefficients,
            noise_sd,
            ridged: false,
        })
    }
}

fn kind_name(kind: &ColumnKind) -> &'static str {
    if kind.is_discrete() {
        "discrete"
    } else {
        "continuous"
    }
}

/// Fit a conditional sampler for column `m`.
///
/// The fits are deterministic closed forms or full-batch descents, so `seed`
/// currently only names the fit; it is kept so richer stochastic fitters can
/// slot in without an interface change.
pub fn fit_sampler(
    dataset: &Dataset,
    m: usize,
    kind: SamplerKind,
    seed: u64,
) -> Result<ConditionalSampler> {
    let _ = seed;
    if m >= dataset.d() {
        return Err(Error::DimensionMismatch {
            expected: dataset.d(),
            got: m,
        });
    }
    let mismatch = |wanted: &str| Error::SamplerMismatch {
        kind: wanted.into(),
        column: dataset.names()[m].clone(),
        column_kind: kind_name(dataset.kind(m)).into(),
    };
    match kind {
        SamplerKind::MarginalNaive => Ok(ConditionalSampler::MarginalNaive {
            target: m,
            values: dataset.feature_column(m),
        }),
        SamplerKind::GaussianLinear => {
            if dataset.kind(m).is_discrete() {
                return Err(mismatch("gaussian-linear"));
            }
            fit_gaussian_linear(dataset, m)
        }
        SamplerKind::DiscreteMultinomial => {
            let ColumnKind::Discrete { levels } = dataset.kind(m) else {
                return Err(mismatch("discrete-multinomial"));
            };
            fit_discrete_multinomial(dataset, m, levels.clone())
        }
    }
}

/// The sampler kind matching a column's type: linear-Gaussian for continuous
/// columns, multinomial logistic for discrete ones.
pub fn default_kind_for(dataset: &Dataset, m: usize) -> SamplerKind {
    if dataset.kind(m).is_discrete() {
        SamplerKind::DiscreteMultinomial
    } else {
        SamplerKind::GaussianLinear
    }
}

fn regressor_columns(dataset: &Dataset, m: usize) -> Vec<usize> {
    dataset
        .canonical_order()
        .into_iter()
        .filter(|&j| j != m)
        .collect()
}

fn fit_gaussian_linear(dataset: &Dataset, m: usize) -> Result<ConditionalSampler> {
    let n = dataset.n();
    let regressors = regressor_columns(dataset, m);
    let p = regressors.len() + 1;
    let mut design = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        design[[i, 0]] = 1.0;
        for (j, &col) in regressors.iter().enumerate() {
            design[[i, j + 1]] = dataset.features()[[i, col]];
        }
    }
    let target = Array1::from_vec(dataset.feature_column(m));
    let xtx = design.t().dot(&design);
    let xty = design.t().dot(&target);

    let (beta, ridged) = match solve_spd(&xtx, &xty) {
        Some(beta) => (beta, false),
        None => {
            log::warn!(
                "singular design fitting column {}; retrying with ridge 1e-6",
                dataset.names()[m]
            );
            let mut ridged_xtx = xtx;
            for i in 0..p {
                ridged_xtx[[i, i]] += 1e-6;
            }
            let beta = solve_spd(&ridged_xtx, &xty).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "normal equations unsolvable for column {}",
                    dataset.names()[m]
                ))
            })?;
            (beta, true)
        }
    };

    let fitted = design.dot(&beta);
    let rss: f64 = fitted
        .iter()
        .zip(target.iter())
        .map(|(f, t)| (t - f) * (t - f))
        .sum();
    let dof = (n.saturating_sub(p)).max(1);
    let noise_sd = (rss / dof as f64).max(0.0).sqrt();

    Ok(ConditionalSampler::GaussianLinear {
        target: m,
        regressors,
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        noise_sd,
        ridged,
    })
}

fn fit_discrete_multinomial(
    dataset: &Dataset,
    m: usize,
    levels: Vec<f64>,
) -> Result<ConditionalSampler> {
    let n = dataset.n();
    let regressors = regressor_columns(dataset, m);
    let p = regressors.len();
    let l = levels.len();
    let col = dataset.feature_column(m);
    let class_of: Vec<usize> = col
        .iter()
        .map(|v| levels.iter().position(|lvl| lvl == v).expect("validated"))
        .collect();

    // class 0 is the zero-parameter baseline
    let mut intercepts = vec![0.0; l];
    let mut coefficients = Array2::<f64>::zeros((l, p));
    if l > 1 {
        let lr = 0.5;
        let iterations = 400;
        let mut probs = vec![0.0; l];
        let mut grad_b = vec![0.0; l];
        let mut grad_w = Array2::<f64>::zeros((l, p));
        for _ in 0..iterations {
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            grad_w.fill(0.0);
            for i in 0..n {
                softmax_probs(
                    &intercepts,
                    &coefficients,
                    dataset,
                    &regressors,
                    i,
                    &mut probs,
                );
                for c in 1..l {
                    let err = probs[c] - f64::from(class_of[i] == c);
                    grad_b[c] += err;
                    for (j, &reg) in regressors.iter().enumerate() {
                        grad_w[[c, j]] += err * dataset.features()[[i, reg]];
                    }
                }
            }
            let scale = lr / n as f64;
            for c in 1..l {
                intercepts[c] -= scale * grad_b[c];
                for j in 0..p {
                    coefficients[[c, j]] -= scale * grad_w[[c, j]];
                }
            }
        }
    }

    Ok(ConditionalSampler::DiscreteMultinomial {
        target: m,
        regressors,
        levels,
        intercepts,
        coefficients,
    })
}

fn softmax_probs(
    intercepts: &[f64],
    coefficients: &Array2<f64>,
    dataset: &Dataset,
    regressors: &[usize],
    row: usize,
    out: &mut [f64],
) {
    let l = intercepts.len();
    let mut max_score = f64::NEG_INFINITY;
    for c in 0..l {
        let mut score = intercepts[c];
        for (j, &reg) in regressors.iter().enumerate() {
            score += coefficients[[c, j]] * dataset.features()[[row, reg]];
        }
        out[c] = score;
        max_score = max_score.max(score);
    }
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max_score).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// Draw a full replacement column for the sampler's target feature, one
/// conditional draw per row. Deterministic in `seed_b`; treatment and
/// outcome are never read.
pub fn resample_feature(
    sampler: &ConditionalSampler,
    dataset: &Dataset,
    seed_b: u64,
) -> Result<Vec<f64>> {
    let n = dataset.n();
    let mut rng = rng_from(seed_b);
    match sampler {
        ConditionalSampler::GaussianLinear {
            regressors,
            intercept,
            coefficients,
            noise_sd,
            ..
        } => {
            if regressors.iter().any(|&j| j >= dataset.d()) {
                return Err(Error::DimensionMismatch {
                    expected: dataset.d(),
                    got: *regressors.iter().max().unwrap(),
                });
            }
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut mean = *intercept;
                for (&c, &j) in coefficients.iter().zip(regressors) {
                    mean += c * dataset.features()[[i, j]];
                }
                // keep the draw stream aligned whether or not noise is zero
                let z = normal.sample(&mut rng);
                out.push(mean + noise_sd * z);
            }
            Ok(out)
        }
        ConditionalSampler::DiscreteMultinomial {
            regressors,
            levels,
            intercepts,
            coefficients,
            ..
        } => {
            if regressors.iter().any(|&j| j >= dataset.d()) {
                return Err(Error::DimensionMismatch {
                    expected: dataset.d(),
                    got: *regressors.iter().max().unwrap(),
                });
            }
            let mut probs = vec![0.0; levels.len()];
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                softmax_probs(intercepts, coefficients, dataset, regressors, i, &mut probs);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = levels.len() - 1;
                for (c, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                out.push(levels[chosen]);
            }
            Ok(out)
        }
        ConditionalSampler::MarginalNaive { values, .. } => {
            if values.is_empty() {
                return Err(Error::InvalidParameter("empty marginal sampler".into()));
            }
            Ok((0..n)
                .map(|_| values[rng.random_range(0..values.len())])
                .collect())
        }
    }
}

/// How a p-value is formed from the resampled statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PvalueRule {
    /// `p = #{resampled >= observed} / B`; can reach exactly 0.
    Plain,
    /// `p = (1 + #{resampled >= observed}) / (1 + B)`; finite-sample valid.
    PlusOne,
}

impl PvalueRule {
    pub fn apply(self, exceeding: usize, b: usize) -> f64 {
        match self {
            PvalueRule::Plain => exceeding as f64 / b as f64,
            PvalueRule::PlusOne => (1 + exceeding) as f64 / (1 + b) as f64,
        }
    }
}

impl std::str::FromStr for PvalueRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" | "plain" => Ok(PvalueRule::Plain),
            "plus-one" | "plusone" => Ok(PvalueRule::PlusOne),
            other => Err(Error::InvalidParameter(format!(
                "unknown p-value rule {other:?}"
            ))),
        }
    }
}

/// Outcome of one conditional randomization test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrtResult {
    pub feature: usize,
    pub observed: f64,
    /// All `B` resampled statistics; invalid replicates are `NaN`.
    #[serde(
        serialize_with = "serialize_draws",
        deserialize_with = "deserialize_draws"
    )]
    pub null_draws: Vec<f64>,
    pub p_value: f64,
    pub b: usize,
    pub invalid: usize,
}

fn serialize_draws<S: serde::Serializer>(
    draws: &[f64],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(
        draws
            .iter()
            .map(|v| if v.is_finite() { Some(*v) } else { None }),
    )
}

fn deserialize_draws<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Vec<f64>, D::Error> {
    let opts: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(opts.into_iter().map(|o| o.unwrap_or(f64::NAN)).collect())
}

/// Share of requested replicates that may fail before the test aborts.
pub const MAX_INVALID_SHARE: f64 = 0.05;

/// Run a conditional randomization test for feature `m`.
///
/// The statistic is recomputed on `b` datasets whose `m`-th column is
/// resampled from the fitted conditional; each replicate draws from its own
/// stream derived from `(seed, replicate index)`, so the result does not
/// depend on evaluation order or worker count. Replicates run in parallel
/// on the ambient rayon pool.
///
/// A replicate whose statistic errors or is non-finite is invalid: it is
/// recorded as `NaN` and counted as exceeding the observed statistic (the
/// conservative direction). More than [`MAX_INVALID_SHARE`] invalid
/// replicates abort the test.
pub fn crt_pvalue<F>(
    dataset: &Dataset,
    m: usize,
    statistic: &F,
    sampler: &ConditionalSampler,
    b: usize,
    seed: u64,
    rule: PvalueRule,
) -> Result<CrtResult>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    let observed = statistic(dataset)?;
    if !observed.is_finite() {
        return Err(Error::NonFinite("observed statistic".into()));
    }
    crt_pvalue_with_observed(dataset, m, observed, statistic, sampler, b, seed, rule)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn crt_pvalue_with_observed<F>(
    dataset: &Dataset,
    m: usize,
    observed: f64,
    statistic: &F,
    sampler: &ConditionalSampler,
    b: usize,
    seed: u64,
    rule: PvalueRule,
) -> Result<CrtResult>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    if b == 0 {
        return Err(Error::InvalidParameter(
            "need at least one replicate".into(),
        ));
    }
    if sampler.target() != m {
        return Err(Error::InvalidParameter(format!(
            "sampler fitted for column {}, test asked for {m}",
            sampler.target()
        )));
    }

    let null_draws: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let seed_b = derive_seed_indexed(seed, "crt-replicate", rep as u64);
            let value = resample_feature(sampler, dataset, seed_b)
                .and_then(|column| dataset.with_feature_column(m, column))
                .and_then(|replaced| statistic(&replaced));
            match value {
                Ok(v) if v.is_finite() => v,
                _ => f64::NAN,
            }
        })
        .collect();

    let invalid = null_draws.iter().filter(|v| !v.is_finite()).count();
    if invalid as f64 > MAX_INVALID_SHARE * b as f64 {
        return Err(Error::TooManyInvalidReplicates { invalid, total: b });
    }
    let exceeding = null_draws
        .iter()
        .filter(|v| !v.is_finite() || **v >= observed)
        .count();
    Ok(CrtResult {
        feature: m,
        observed,
        null_draws,
        p_value: rule.apply(exceeding, b),
        b,
        invalid,
    })
}
