//! Multiple-testing adjustment and the end-to-end selection pipeline.
//!
//! The pipeline fits the propensity model once, computes every feature's
//! importance, runs one conditional randomization test per feature, adjusts
//! the p-values by the Benjamini-Hochberg step-up rule, and selects the
//! features whose adjusted p-value is at most `alpha`.
//!
//! All internal randomness derives from the single master seed; per-feature
//! streams are keyed by column *name*, so permuting dataset columns permutes
//! the outputs and nothing else.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crt::{
    crt_pvalue_with_observed, default_kind_for, fit_sampler, CrtResult, PvalueRule, SamplerKind,
};
use crate::dataset::Dataset;
use crate::kernels::{make_rff, MEDIAN_HEURISTIC_CAP};
use crate::propensity::{fit_propensity, ipw_weights, TrainConfig};
use crate::rng::derive_seed;
use crate::wcmmd::{
    importance, importance_cached, Bandwidths, CurveCache, ImportanceConfig, ImportanceResult,
    Mode,
};
use crate::{Error, Result};

/// Benjamini-Hochberg step-up adjustment.
///
/// With the p-values sorted ascending, the adjusted value at rank `i` (1-based)
/// is `min_{j >= i} min(1, p_(j) * d / j)`, mapped back to input order.
pub fn bh_adjust(pvals: &[f64]) -> Result<Vec<f64>> {
    if pvals.is_empty() {
        return Ok(Vec::new());
    }
    for &p in pvals {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "p-value {p} outside [0, 1]"
            )));
        }
    }
    let d = pvals.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| pvals[a].partial_cmp(&pvals[b]).unwrap().then(a.cmp(&b)));

    let mut adjusted = vec![0.0; d];
    let mut running = f64::INFINITY;
    for rank in (0..d).rev() {
        let idx = order[rank];
        let scaled = pvals[idx] * d as f64 / (rank + 1) as f64;
        running = running.min(scaled);
        adjusted[idx] = running.min(1.0);
    }
    Ok(adjusted)
}

/// True and false positive rates of a selection against a known truth:
/// `tpr = |S ∩ T| / |T|` and `fpr = |S \ T| / (d - |T|)`.
pub fn evaluate_tpr_fpr(selected: &[usize], d: usize, true_set: &[usize]) -> Result<(f64, f64)> {
    if true_set.is_empty() {
        return Err(Error::InvalidParameter(
            "true feature set is empty; TPR undefined".into(),
        ));
    }
    if true_set.iter().any(|&m| m >= d) {
        return Err(Error::InvalidParameter(
            "true feature set contains an out-of-range index".into(),
        ));
    }
    let true_positives = selected.iter().filter(|m| true_set.contains(m)).count();
    let false_positives = selected.len() - true_positives;
    let negatives = d - true_set.len();
    let tpr = true_positives as f64 / true_set.len() as f64;
    let fpr = if negatives == 0 {
        0.0
    } else {
        false_positives as f64 / negatives as f64
    };
    Ok((tpr, fpr))
}

/// Which conditional model feeds the randomization test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerPolicy {
    /// Model `X_m | X_-m` (linear-Gaussian or multinomial by column type).
    Conditional,
    /// Bootstrap the marginal of `X_m`, ignoring the other columns.
    Naive,
}

impl std::str::FromStr for SamplerPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conditional" => Ok(SamplerPolicy::Conditional),
            "naive" | "marginal" => Ok(SamplerPolicy::Naive),
            other => Err(Error::InvalidParameter(format!(
                "unknown sampler policy {other:?}"
            ))),
        }
    }
}

/// Statistic evaluation mode for the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatMode {
    Rff,
    Exact,
}

impl std::str::FromStr for StatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rff" => Ok(StatMode::Rff),
            "exact" => Ok(StatMode::Exact),
            other => Err(Error::InvalidParameter(format!("unknown mode {other:?}"))),
        }
    }
}

/// Pipeline configuration. `seed` drives every stochastic component; the
/// seed inside `train` is ignored and replaced by a derived one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectConfig {
    pub alpha: f64,
    /// Resampled datasets per feature.
    pub b: usize,
    /// Random Fourier feature dimension (rff mode).
    pub r: usize,
    pub mode: StatMode,
    pub sampler: SamplerPolicy,
    pub pvalue_rule: PvalueRule,
    pub seed: u64,
    pub train: TrainConfig,
    /// Subsample cap for median-heuristic bandwidths.
    pub median_cap: usize,
    pub gram_cap_bytes: usize,
    /// Refit the propensity model inside every resampled replicate instead
    /// of reusing the fit from the observed data.
    pub refit_propensity: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            b: 100,
            r: 1000,
            mode: StatMode::Rff,
            sampler: SamplerPolicy::Conditional,
            pvalue_rule: PvalueRule::Plain,
            seed: 0,
            train: TrainConfig::default(),
            median_cap: MEDIAN_HEURISTIC_CAP,
            gram_cap_bytes: ImportanceConfig::DEFAULT_GRAM_CAP,
            refit_propensity: false,
        }
    }
}

impl SelectConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.b == 0 {
            return Err(Error::InvalidParameter("need b >= 1 replicates".into()));
        }
        if self.mode == StatMode::Rff && self.r == 0 {
            return Err(Error::InvalidParameter("need r >= 1 random features".into()));
        }
        Ok(())
    }
}

/// Wall-clock seconds spent in each pipeline phase.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub propensity_s: f64,
    pub importance_s: f64,
    pub crt_s: f64,
}

/// Everything the pipeline produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub feature_names: Vec<String>,
    pub alpha: f64,
    /// Raw CRT p-values; features whose test failed carry 1.0.
    pub raw_p: Vec<f64>,
    pub adjusted_p: Vec<f64>,
    /// Indices with `adjusted_p <= alpha`, ascending.
    pub selected: Vec<usize>,
    pub importances: Vec<Option<ImportanceResult>>,
    pub crt: Vec<Option<CrtResult>>,
    /// Per-feature failure messages; failed features are never selected but
    /// still count toward the Benjamini-Hochberg denominator.
    pub failures: Vec<Option<String>>,
    pub timings: PhaseTimings,
}

impl SelectionResult {
    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn selected_names(&self) -> Vec<&str> {
        self.selected
            .iter()
            .map(|&m| self.feature_names[m].as_str())
            .collect()
    }

    pub fn tpr_fpr(&self, true_set: &[usize]) -> Result<(f64, f64)> {
        evaluate_tpr_fpr(&self.selected, self.d(), true_set)
    }

    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Flat per-feature summary: name, importance, raw and adjusted p,
    /// selected flag.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["feature", "importance", "p_raw", "p_adjusted", "selected"])?;
        for m in 0..self.d() {
            let importance = self.importances[m]
                .as_ref()
                .map(|r| r.importance.to_string())
                .unwrap_or_default();
            writer.write_record([
                self.feature_names[m].as_str(),
                &importance,
                &self.raw_p[m].to_string(),
                &self.adjusted_p[m].to_string(),
                if self.selected.contains(&m) { "1" } else { "0" },
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Run the full selection pipeline on a dataset.
pub fn select(dataset: &Dataset, config: &SelectConfig) -> Result<SelectionResult> {
    config.validate()?;
    let d = dataset.d();

    let train = TrainConfig {
        seed: derive_seed(config.seed, "propensity"),
        ..config.train.clone()
    };
    let t = Instant::now();
    let model = fit_propensity(dataset, &train)?;
    let ipw = ipw_weights(&model, dataset)?;
    let propensity_s = t.elapsed().as_secs_f64();

    let bandwidths = Bandwidths::from_dataset(dataset, config.median_cap)?;
    let mode = match config.mode {
        StatMode::Exact => Mode::Exact,
        StatMode::Rff => Mode::Rff(make_rff(
            bandwidths.h_y,
            config.r,
            derive_seed(config.seed, "rff"),
        )?),
    };
    let imp_config = ImportanceConfig {
        mode,
        bandwidths,
        gram_cap_bytes: config.gram_cap_bytes,
    };

    // outcome-side state is shared by every feature and every replicate
    let cache = CurveCache::build(dataset, &ipw, &imp_config)?;

    let mut failures: Vec<Option<String>> = vec![None; d];
    let t = Instant::now();
    let mut importances: Vec<Option<ImportanceResult>> = Vec::with_capacity(d);
    for m in 0..d {
        match importance_cached(dataset, m, &ipw, &imp_config, &cache) {
            Ok(res) => importances.push(Some(res)),
            Err(e) => {
                log::warn!("importance failed for {}: {e}", dataset.names()[m]);
                failures[m] = Some(format!("importance: {e}"));
                importances.push(None);
            }
        }
    }
    let importance_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut crt_results: Vec<Option<CrtResult>> = vec![None; d];
    for m in 0..d {
        let Some(imp) = &importances[m] else {
            continue;
        };
        let feature_seed = derive_seed(config.seed, &dataset.names()[m]);
        let kind = match config.sampler {
            SamplerPolicy::Conditional => default_kind_for(dataset, m),
            SamplerPolicy::Naive => SamplerKind::MarginalNaive,
        };
        let run = || -> Result<CrtResult> {
            let sampler = fit_sampler(dataset, m, kind, derive_seed(feature_seed, "sampler"))?;
            let ipw = &ipw;
            let imp_config = &imp_config;
            let cache = &cache;
            let train = &train;
            let refit = config.refit_propensity;
            let statistic = move |ds: &Dataset| -> Result<f64> {
                if refit {
                    let model = fit_propensity(ds, train)?;
                    let ipw = ipw_weights(&model, ds)?;
                    importance(ds, m, &ipw, imp_config).map(|r| r.importance)
                } else {
                    importance_cached(ds, m, ipw, imp_config, cache).map(|r| r.importance)
                }
            };
            crt_pvalue_with_observed(
                dataset,
                m,
                imp.importance,
                &statistic,
                &sampler,
                config.b,
                feature_seed,
                config.pvalue_rule,
            )
        };
        match run() {
            Ok(res) => crt_results[m] = Some(res),
            Err(e) => {
                log::warn!("CRT failed for {}: {e}", dataset.names()[m]);
                failures[m] = Some(format!("crt: {e}"));
            }
        }
    }
    let crt_s = t.elapsed().as_secs_f64();

    // failed features keep p = 1: never selected, still in the BH denominator
    let raw_p: Vec<f64> = crt_results
        .iter()
        .map(|r| r.as_ref().map(|c| c.p_value).unwrap_or(1.0))
        .collect();
    let adjusted_p = bh_adjust(&raw_p)?;
    let selected: Vec<usize> = (0..d).filter(|&m| adjusted_p[m] <= config.alpha).collect();

    Ok(SelectionResult {
        feature_names: dataset.names().to_vec(),
        alpha: config.alpha,
        raw_p,
        adjusted_p,
        selected,
        importances,
        crt: crt_results,
        failures,
        timings: PhaseTimings {
            propensity_s,
            importance_s,
            crt_s,
        },
    })
}
