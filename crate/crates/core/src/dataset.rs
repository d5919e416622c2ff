//! Data model, synthetic benchmark generators, and CSV interchange.
//!
//! A [`Dataset`] holds the observable triplet per row: a binary treatment, a
//! feature vector (each column tagged continuous or discrete), and a real
//! outcome. Generators additionally produce both potential outcomes, which
//! are returned separately from the observable dataset so estimator code can
//! never touch them; tests use them as oracles.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::cholesky;
use crate::rng::rng_from;
use crate::{Error, Result};

/// Column type tag for a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    /// Discrete with a declared, sorted set of admissible values.
    Discrete { levels: Vec<f64> },
}

impl ColumnKind {
    pub fn is_discrete(&self) -> bool {
        matches!(self, ColumnKind::Discrete { .. })
    }
}

/// An immutable sample of `(a_i, x_i, y_i)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    features: Array2<f64>,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
}

impl Dataset {
    pub fn new(
        names: Vec<String>,
        kinds: Vec<ColumnKind>,
        features: Array2<f64>,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let n = features.nrows();
        let d = features.ncols();
        if n < 2 {
            return Err(Error::InvalidDataset(format!("need n >= 2 rows, got {n}")));
        }
        if d < 1 {
            return Err(Error::InvalidDataset("need at least one feature".into()));
        }
        if names.len() != d || kinds.len() != d {
            return Err(Error::InvalidDataset(format!(
                "{} names and {} kinds for {d} feature columns",
                names.len(),
                kinds.len()
            )));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} treatments and {} outcomes for {n} rows",
                treatment.len(),
                outcome.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(':') {
                return Err(Error::InvalidDataset(format!(
                    "feature name {name:?} is empty or contains ':'"
                )));
            }
            if names[..i].contains(name) {
                return Err(Error::InvalidDataset(format!("duplicate column {name:?}")));
            }
        }
        if let Some(a) = treatment.iter().find(|&&a| a > 1) {
            return Err(Error::InvalidDataset(format!(
                "treatment value {a} is not in {{0, 1}}"
            )));
        }
        if outcome.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidDataset("non-finite outcome value".into()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        for (m, kind) in kinds.iter().enumerate() {
            if let ColumnKind::Discrete { levels } = kind {
                if levels.is_empty() {
                    return Err(Error::InvalidDataset(format!(
                        "discrete column {} has an empty level set",
                        names[m]
                    )));
                }
                if levels.iter().any(|l| !l.is_finite())
                    || levels.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::InvalidDataset(format!(
                        "levels of column {} must be finite, sorted, and distinct",
                        names[m]
                    )));
                }
                if let Some(bad) = features
                    .column(m)
                    .iter()
                    .find(|v| !levels.contains(v))
                {
                    return Err(Error::InvalidDataset(format!(
                        "value {bad} of column {} is outside its level set",
                        names[m]
                    )));
                }
            }
        }
        Ok(Self {
            names,
            kinds,
            features,
            treatment,
            outcome,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, m: usize) -> &ColumnKind {
        &self.kinds[m]
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Feature row `x_i` as a contiguous vector.
    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).to_vec()
    }

    /// Feature column `m` as a contiguous vector.
    pub fn feature_column(&self, m: usize) -> Vec<f64> {
        self.features.column(m).to_vec()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    /// Feature indices ordered by column name. Joint model fits consume
    /// columns in this order so that results do not depend on column layout.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.d()).collect();
        idx.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        idx
    }

    /// A copy of the dataset with column `m` replaced, as used by the
    /// conditional randomization test. Discrete columns keep their declared
    /// levels; replacement values must respect them.
    pub fn with_feature_column(&self, m: usize, column: Vec<f64>) -> Result<Self> {
        if m >= self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: m,
            });
        }
        if column.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: column.len(),
            });
        }
        let mut features = self.features.clone();
        for (i, v) in column.into_iter().enumerate() {
            features[[i, m]] = v;
        }
        Dataset::new(
            self.names.clone(),
            self.kinds.clone(),
            features,
            self.treatment.clone(),
            self.outcome.clone(),
        )
    }
}

/// Synthetic benchmark family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Relevant features shift the potential outcome means linearly.
    LinMean,
    /// Relevant features shift the means through a cubic.
    NonlinMean,
    /// Relevant features drive the treated outcome variance linearly.
    LinVar,
    /// Relevant features drive the treated outcome variance through a cubic.
    NonlinVar,
    /// Relevant features move only the potential outcome covariance
    /// (linear index); a negative control invisible to marginal comparisons.
    LinCovar,
    /// Covariance-only control with the cubic index.
    NonlinCovar,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::LinMean,
        ScenarioKind::NonlinMean,
        ScenarioKind::LinVar,
        ScenarioKind::NonlinVar,
        ScenarioKind::LinCovar,
        ScenarioKind::NonlinCovar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::LinMean => "LinMean",
            ScenarioKind::NonlinMean => "NonlinMean",
            ScenarioKind::LinVar => "LinVar",
            ScenarioKind::NonlinVar => "NonlinVar",
            ScenarioKind::LinCovar => "LinCovar",
            ScenarioKind::NonlinCovar => "NonlinCovar",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown scenario {s:?}; expected one of LinMean, NonlinMean, LinVar, NonlinVar, LinCovar, NonlinCovar"
                ))
            })
    }
}

/// A fully specified synthetic generation setup.
///
/// Features are Gaussian with mean `-mu` (untreated) or `+mu` (treated) in
/// every coordinate and covariance `Sigma[i][j] = sigma^|i-j|`. The first
/// five features drive the potential outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub d: usize,
    pub mu: f64,
    pub sigma: f64,
}

impl Scenario {
    pub const DEFAULT_D: usize = 30;
    pub const DEFAULT_MU: f64 = 0.2;
    pub const DEFAULT_SIGMA: f64 = 0.2;

    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            d: Self::DEFAULT_D,
            mu: Self::DEFAULT_MU,
            sigma: Self::DEFAULT_SIGMA,
        }
    }

    pub fn with_d(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.d < 5 {
            return Err(Error::InvalidParameter(format!(
                "scenarios use features x1..x5, need d >= 5, got {}",
                self.d
            )));
        }
        if !(self.sigma > -1.0 && self.sigma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must lie in (-1, 1), got {}",
                self.sigma
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::NonFinite("scenario mu".into()));
        }
        Ok(())
    }

    /// Feature covariance `Sigma[i][j] = sigma^|i-j|`.
    pub fn covariance(&self) -> Array2<f64> {
        let mut cov = Array2::<f64>::zeros((self.d, self.d));
        for i in 0..self.d {
            for j in 0..self.d {
                cov[[i, j]] = self.sigma.powi((i as i32 - j as i32).abs());
            }
        }
        cov
    }

    /// Indices of the truly relevant features (the first five).
    pub fn true_modifiers(&self) -> Vec<usize> {
        (0..5).collect()
    }
}

fn linear_index(x: &[f64]) -> f64 {
    4.0 * x[0] + 2.0 * x[1] + x[2] + 2.0 * x[3] + 4.0 * x[4]
}

fn cubic_index(x: &[f64]) -> f64 {
    let cubes: f64 = x[..5].iter().map(|v| (v - 0.5).powi(3)).sum();
    let linear: f64 = x[..5].iter().sum();
    cubes + 3.0 * linear - 6.0
}

fn floor_one(v: f64) -> f64 {
    v.max(1.0)
}

/// A generated sample together with the potential outcomes behind it.
///
/// Only [`SyntheticSample::dataset`] is observable; `y0` and `y1` exist for
/// oracle checks and never feed the estimators.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub dataset: Dataset,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Generate an observable dataset for a benchmark scenario.
pub fn generate_synthetic(scenario: &Scenario, n: usize, seed: u64) -> Result<Dataset> {
    Ok(generate_synthetic_full(scenario, n, seed)?.dataset)
}

/// As [`generate_synthetic`], retaining the potential outcome columns.
pub fn generate_synthetic_full(
    scenario: &Scenario,
    n: usize,
    seed: u64,
) -> Result<SyntheticSample> {
    scenario.validate()?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need n >= 2, got {n}")));
    }
    let d = scenario.d;
    let chol = cholesky(&scenario.covariance()).ok_or_else(|| {
        Error::InvalidParameter("feature covariance is not positive definite".into())
    })?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = rng_from(seed);

    let mut features = Array2::<f64>::zeros((n, d));
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut y0s = Vec::with_capacity(n);
    let mut y1s = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];

    for i in 0..n {
        let a: u8 = u8::from(rng.random::<f64>() < 0.5);
        for zi in z.iter_mut() {
            *zi = std_normal.sample(&mut rng);
        }
        let mean = if a == 1 { scenario.mu } else { -scenario.mu };
        for (j, xj) in x.iter_mut().enumerate() {
            let mut acc = mean;
            for k in 0..=j {
                acc += chol[[j, k]] * z[k];
            }
            *xj = acc;
        }
        let e0 = std_normal.sample(&mut rng);
        let e1 = std_normal.sample(&mut rng);

        let (y0, y1) = match scenario.kind {
            ScenarioKind::LinMean => {
                let f = linear_index(&x);
                (-f + e0, f + e1)
            }
            ScenarioKind::NonlinMean => {
                let g = cubic_index(&x);
                (-g + e0, g + e1)
            }
            ScenarioKind::LinVar => (-5.0 + e0, floor_one(linear_index(&x)) * e1),
            ScenarioKind::NonlinVar => (-5.0 + e0, floor_one(cubic_index(&x)) * e1),
            ScenarioKind::LinCovar | ScenarioKind::NonlinCovar => {
                let idx = match scenario.kind {
                    ScenarioKind::LinCovar => linear_index(&x),
                    _ => cubic_index(&x),
                };
                let rho = 1.0 - 1.0 / floor_one(idx);
                (-5.0 + e0, rho * e0 + (1.0 - rho * rho).sqrt() * e1)
            }
        };

        features.row_mut(i).iter_mut().zip(&x).for_each(|(f, &v)| *f = v);
        treatment.push(a);
        y0s.push(y0);
        y1s.push(y1);
        outcome.push(if a == 1 { y1 } else { y0 });
    }

    let names = (1..=d).map(|j| format!("x{j}")).collect();
    let kinds = vec![ColumnKind::Continuous; d];
    let dataset = Dataset::new(names, kinds, features, treatment, outcome)?;
    Ok(SyntheticSample {
        dataset,
        y0: y0s,
        y1: y1s,
    })
}

/// Joint probability tables of the potential outcomes given a single
/// discrete feature: one `(y0, y1)` probability matrix per feature level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    x_levels: Vec<f64>,
    y_levels: Vec<f64>,
    /// `probs[x][i][j] = P(Y0 = y_levels[i], Y1 = y_levels[j] | X = x_levels[x])`
    probs: Vec<Array2<f64>>,
}

impl JointTable {
    pub fn new(x_levels: Vec<f64>, y_levels: Vec<f64>, probs: Vec<Array2<f64>>) -> Result<Self> {
        if x_levels.is_empty() || y_levels.is_empty() {
            return Err(Error::InvalidParameter("joint table has empty levels".into()));
        }
        if x_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "x levels must be sorted and distinct".into(),
            ));
        }
        if probs.len() != x_levels.len() {
            return Err(Error::InvalidParameter(format!(
                "{} probability tables for {} x levels",
                probs.len(),
                x_levels.len()
            )));
        }
        let k = y_levels.len();
        for (lvl, table) in x_levels.iter().zip(&probs) {
            if table.nrows() != k || table.ncols() != k {
                return Err(Error::InvalidParameter(format!(
                    "table at x = {lvl} is not {k}x{k}"
                )));
            }
            if table.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "negative probability at x = {lvl}"
                )));
            }
            let total: f64 = table.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "table at x = {lvl} sums to {total}, expected 1"
                )));
            }
        }
        Ok(Self {
            x_levels,
            y_levels,
            probs,
        })
    }

    pub fn x_levels(&self) -> &[f64] {
        &self.x_levels
    }

    pub fn y_levels(&self) -> &[f64] {
        &self.y_levels
    }

    pub fn probs(&self) -> &[Array2<f64>] {
        &self.probs
    }

    /// Binary-feature fixture where the feature leaves the conditional
    /// averages untouched but switches the treatment effect variance off:
    /// at `x = 0` the treated outcome is `-1` or `1` with equal probability
    /// while the untreated outcome is always `0`; at `x = 1` both outcomes
    /// are always `0`.
    pub fn variance_only_example() -> Self {
        let mut at0 = Array2::<f64>::zeros((3, 3));
        at0[[1, 0]] = 0.5; // (y0, y1) = (0, -1)
        at0[[1, 2]] = 0.5; // (y0, y1) = (0, +1)
        let mut at1 = Array2::<f64>::zeros((3, 3));
        at1[[1, 1]] = 1.0; // (y0, y1) = (0, 0)
        Self::new(vec![0.0, 1.0], vec![-1.0, 0.0, 1.0], vec![at0, at1]).expect("valid fixture")
    }

    /// Binary-feature fixture where both marginal potential outcome
    /// distributions are identical at every feature level (so every marginal
    /// comparison is blind) yet the joint distribution flips from perfectly
    /// correlated to perfectly anti-correlated.
    pub fn covariance_counterexample() -> Self {
        let mut at0 = Array2::<f64>::zeros((3, 3));
        at0[[0, 0]] = 0.5; // (-1, -1)
        at0[[2, 2]] = 0.5; // (+1, +1)
        let mut at1 = Array2::<f64>::zeros((3, 3));
        at1[[0, 2]] = 0.5; // (-1, +1)
        at1[[2, 0]] = 0.5; // (+1, -1)
        Self::new(vec![0.0, 1.0], vec![-1.0, 0.0, 1.0], vec![at0, at1]).expect("valid fixture")
    }

    /// Fixture with the same joint table at every feature level; the feature
    /// carries no information about the potential outcomes at all.
    pub fn constant_table_example() -> Self {
        let mut t = Array2::<f64>::zeros((3, 3));
        t[[1, 0]] = 0.5;
        t[[1, 2]] = 0.5;
        Self::new(vec![0.0, 1.0], vec![-1.0, 0.0, 1.0], vec![t.clone(), t]).expect("valid fixture")
    }
}

/// Draw an observable dataset from a joint table with randomized treatment.
pub fn generate_from_table(
    table: &JointTable,
    marginal_x: &[f64],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(generate_from_table_full(table, marginal_x, n, seed)?.dataset)
}

/// As [`generate_from_table`], retaining the potential outcome columns.
pub fn generate_from_table_full(
    table: &JointTable,
    marginal_x: &[f64],
    n: usize,
    seed: u64,
) -> Result<SyntheticSample> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need n >= 2, got {n}")));
    }
    if marginal_x.len() != table.x_levels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} marginal probabilities for {} x levels",
            marginal_x.len(),
            table.x_levels.len()
        )));
    }
    if marginal_x.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidParameter("negative marginal probability".into()));
    }
    let total: f64 = marginal_x.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "marginal_x sums to {total}, expected 1"
        )));
    }

    let k = table.y_levels.len();
    let mut rng = rng_from(seed);
    let mut features = Array2::<f64>::zeros((n, 1));
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut y0s = Vec::with_capacity(n);
    let mut y1s = Vec::with_capacity(n);

    for i in 0..n {
        let lvl = sample_categorical(&mut rng, marginal_x);
        let cell = {
            let flat = table.probs[lvl].as_slice().expect("row-major table");
            sample_categorical(&mut rng, flat)
        };
        let y0 = table.y_levels[cell / k];
        let y1 = table.y_levels[cell % k];
        let a: u8 = u8::from(rng.random::<f64>() < 0.5);
        features[[i, 0]] = table.x_levels[lvl];
        treatment.push(a);
        y0s.push(y0);
        y1s.push(y1);
        outcome.push(if a == 1 { y1 } else { y0 });
    }

    let kinds = vec![ColumnKind::Discrete {
        levels: table.x_levels.clone(),
    }];
    let dataset = Dataset::new(vec!["x".into()], kinds, features, treatment, outcome)?;
    Ok(SyntheticSample {
        dataset,
        y0: y0s,
        y1: y1s,
    })
}

fn sample_categorical(rng: &mut rand_chacha::ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Provenance sidecar written next to generated CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub mu: f64,
    pub sigma: f64,
}

/// Write a dataset as CSV. The header tags each column with its kind:
/// `a:treatment`, `y:outcome`, and `name:continuous` or `name:discrete`.
pub fn save_csv<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["a:treatment".to_string()];
    for (name, kind) in dataset.names().iter().zip(dataset.kinds()) {
        let tag = if kind.is_discrete() { "discrete" } else { "continuous" };
        header.push(format!("{name}:{tag}"));
    }
    header.push("y:outcome".to_string());
    writer.write_record(&header)?;

    let mut record = Vec::with_capacity(dataset.d() + 2);
    for i in 0..dataset.n() {
        record.clear();
        record.push(dataset.treatment()[i].to_string());
        for m in 0..dataset.d() {
            record.push(dataset.features()[[i, m]].to_string());
        }
        record.push(dataset.outcome()[i].to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a dataset written by [`save_csv`] (or any CSV using the same header
/// tags). Levels of discrete columns are inferred from the observed values.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;

    #[derive(Clone, Copy, PartialEq)]
    enum Tag {
        Treatment,
        Outcome,
        Continuous,
        Discrete,
    }

    let mut columns: Vec<(String, Tag)> = Vec::new();
    for field in reader.headers()? {
        let (name, tag) = field.rsplit_once(':').ok_or_else(|| {
            Error::InvalidDataset(format!(
                "column {field:?} lacks a kind tag (expected name:kind)"
            ))
        })?;
        let tag = match tag {
            "treatment" => Tag::Treatment,
            "outcome" => Tag::Outcome,
            "continuous" => Tag::Continuous,
            "discrete" => Tag::Discrete,
            other => {
                return Err(Error::InvalidDataset(format!(
                    "unknown column kind {other:?} for {name:?}"
                )))
            }
        };
        columns.push((name.to_string(), tag));
    }
    let treatment_cols = columns.iter().filter(|(_, t)| *t == Tag::Treatment).count();
    let outcome_cols = columns.iter().filter(|(_, t)| *t == Tag::Outcome).count();
    if treatment_cols != 1 || outcome_cols != 1 {
        return Err(Error::InvalidDataset(format!(
            "expected exactly one treatment and one outcome column, got {treatment_cols} and {outcome_cols}"
        )));
    }

    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut names = Vec::new();
    let mut feature_tags = Vec::new();
    for (name, tag) in &columns {
        if matches!(tag, Tag::Continuous | Tag::Discrete) {
            names.push(name.clone());
            feature_tags.push(*tag);
        }
    }
    let d = names.len();
    let mut feature_rows: Vec<f64> = Vec::new();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != columns.len() {
            return Err(Error::InvalidDataset(format!(
                "row {}: {} fields for {} columns",
                row_idx + 1,
                record.len(),
                columns.len()
            )));
        }
        for (field, (name, tag)) in record.iter().zip(&columns) {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidDataset(format!(
                    "row {}: cannot parse {field:?} in column {name:?}",
                    row_idx + 1
                ))
            })?;
            match tag {
                Tag::Treatment => {
                    if value == 0.0 {
                        treatment.push(0);
                    } else if value == 1.0 {
                        treatment.push(1);
                    } else {
                        return Err(Error::InvalidDataset(format!(
                            "row {}: treatment value {field:?} is not 0 or 1",
                            row_idx + 1
                        )));
                    }
                }
                Tag::Outcome => outcome.push(value),
                Tag::Continuous | Tag::Discrete => feature_rows.push(value),
            }
        }
    }

    let n = treatment.len();
    let features = Array2::from_shape_vec((n, d), feature_rows)
        .map_err(|e| Error::InvalidDataset(format!("feature shape: {e}")))?;
    let kinds = feature_tags
        .iter()
        .enumerate()
        .map(|(m, tag)| match tag {
            Tag::Discrete => {
                let mut levels: Vec<f64> = features.column(m).to_vec();
                levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
                levels.dedup();
                ColumnKind::Discrete { levels }
            }
            _ => ColumnKind::Continuous,
        })
        .collect();
    Dataset::new(names, kinds, features, treatment, outcome)
}
