//! Gaussian kernels, median-heuristic bandwidths, and random Fourier features.
//!
//! The outcome kernel and all feature-smoothing kernels are Gaussian,
//! `k(u, v) = exp(-(u - v)^2 / h^2)`. The Gaussian kernel is characteristic,
//! so a zero MMD implies equal distributions; no other kernel family is
//! offered.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::{Error, Result};

/// A strictly positive, finite kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive and finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `exp(-(u - v)^2 / h^2)`, in `(0, 1]` and symmetric in its arguments.
pub fn gaussian_kernel(u: f64, v: f64, h: Bandwidth) -> Result<f64> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite(format!("gaussian_kernel({u}, {v})")));
    }
    Ok(gaussian_unchecked(u, v, h.value()))
}

#[inline(always)]
pub(crate) fn gaussian_unchecked(u: f64, v: f64, h: f64) -> f64 {
    let d = (u - v) / h;
    (-d * d).exp()
}

/// Default subsample cap for [`median_heuristic`].
pub const MEDIAN_HEURISTIC_CAP: usize = 2000;

// Subsampling inside the median heuristic always uses this frozen seed, so
// the selected bandwidth is a pure function of the input values.
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x6d65_6469_616e;

/// Median of pairwise absolute differences, used as a kernel bandwidth.
///
/// When more than `cap` values are given, the median is taken over a uniform
/// subsample of `cap` points drawn with a frozen internal seed, keeping the
/// cost at `O(cap^2)`. The median is the upper median (element at index
/// `len / 2` of the sorted differences).
pub fn median_heuristic(values: &[f64], cap: usize) -> Result<Bandwidth> {
    if cap < 2 {
        return Err(Error::InvalidParameter(format!(
            "median heuristic cap must be at least 2, got {cap}"
        )));
    }
    if values.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "median heuristic needs at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("median_heuristic value {bad}")));
    }

    let subsample: Vec<f64>;
    let points: &[f64] = if values.len() <= cap {
        values
    } else {
        let mut rng = rng_from(MEDIAN_SUBSAMPLE_SEED);
        // partial Fisher-Yates: the first `cap` entries form a uniform sample
        let mut idx: Vec<usize> = (0..values.len()).collect();
        for i in 0..cap {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        subsample = idx[..cap].iter().map(|&i| values[i]).collect();
        &subsample
    };

    let mut diffs = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (i, &a) in points.iter().enumerate() {
        for &b in &points[i + 1..] {
            diffs.push((a - b).abs());
        }
    }
    diffs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let median = diffs[diffs.len() / 2];
    if median <= 0.0 {
        return Err(Error::ZeroMedian);
    }
    Bandwidth::new(median)
}

/// A random Fourier feature map for the Gaussian kernel.
///
/// The map `z(y)` has components `sqrt(2/r) * cos(lambda_i * y + zeta_i)`
/// with frequencies `lambda_i ~ N(0, 2/h^2)` and phases
/// `zeta_i ~ Unif[0, 2pi)`, so the plain inner product `<z(u), z(v)>`
/// is an unbiased approximation of `exp(-(u - v)^2 / h^2)`.
///
/// Serialized maps embed the drawn frequencies and phases for bit-exact
/// round-trips; a map with only `(h, r, seed)` present is regenerated from
/// the seed on deserialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "RffMapRepr")]
pub struct RffMap {
    r: usize,
    bandwidth: Bandwidth,
    seed: u64,
    frequencies: Vec<f64>,
    phases: Vec<f64>,
}

#[derive(Deserialize)]
struct RffMapRepr {
    r: usize,
    bandwidth: Bandwidth,
    seed: u64,
    #[serde(default)]
    frequencies: Vec<f64>,
    #[serde(default)]
    phases: Vec<f64>,
}

impl From<RffMapRepr> for RffMap {
    fn from(repr: RffMapRepr) -> Self {
        if repr.frequencies.len() == repr.r && repr.phases.len() == repr.r {
            RffMap {
                r: repr.r,
                bandwidth: repr.bandwidth,
                seed: repr.seed,
                frequencies: repr.frequencies,
                phases: repr.phases,
            }
        } else {
            make_rff(repr.bandwidth, repr.r, repr.seed).expect("r >= 1 in serialized map")
        }
    }
}

/// Draw a fresh feature map of dimension `r` for bandwidth `h`.
pub fn make_rff(h: Bandwidth, r: usize, seed: u64) -> Result<RffMap> {
    if r == 0 {
        return Err(Error::InvalidParameter(
            "rff dimension r must be at least 1".into(),
        ));
    }
    let mut rng = rng_from(seed);
    // Spectral law of exp(-d^2/h^2): frequencies are N(0, 2/h^2).
    let freq_sd = std::f64::consts::SQRT_2 / h.value();
    let normal = Normal::new(0.0, freq_sd).expect("finite sd");
    let frequencies: Vec<f64> = (0..r).map(|_| normal.sample(&mut rng)).collect();
    let phases: Vec<f64> = (0..r)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    Ok(RffMap {
        r,
        bandwidth: h,
        seed,
        frequencies,
        phases,
    })
}

impl RffMap {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// The feature vector `z(y)`; `||z(y)||^2 <= 2`.
    pub fn features(&self, y: f64) -> Result<Vec<f64>> {
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("rff features of {y}")));
        }
        let mut out = vec![0.0; self.r];
        self.features_into(y, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn features_into(&self, y: f64, out: &mut [f64]) {
        let scale = (2.0 / self.r as f64).sqrt();
        for ((o, &l), &z) in out
            .iter_mut()
            .zip(self.frequencies.iter())
            .zip(self.phases.iter())
        {
            *o = scale * (l * y + z).cos();
        }
    }

    /// Feature matrix with one row `z(y_i)` per outcome value.
    pub fn feature_matrix(&self, ys: &[f64]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((ys.len(), self.r));
        for (mut row, &y) in out.outer_iter_mut().zip(ys.iter()) {
            self.features_into(y, row.as_slice_mut().expect("contiguous row"));
        }
        out
    }
}
