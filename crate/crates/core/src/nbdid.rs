//! NB2 regression with log link for the DiD panels: design matrices,
//! maximum likelihood with dispersion, plain and clustered covariance,
//! marginal effects and percent-of-baseline summaries.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::design::{DesignAssignment, RegionPanel};
use crate::error::{Error, Result};
use crate::geodata::ZoneSet;
use crate::ingest::{
    DayType, Direction, Feature, FeatureTable, Mode, ObservationPanel, Period, TimeBlock,
};
use crate::warning::Warning;

/// Lower bound for the dispersion; a fit resting here is at the Poisson boundary.
pub const ALPHA_FLOOR: f64 = 1e-10;

/// Full column layout. Reference levels are Mon–Thu and the morning valley.
pub const COLUMN_NAMES: [&str; 16] = [
    "intercept",
    "treatment",
    "post",
    "treatment_x_post",
    "friday",
    "saturday",
    "sunday",
    "morning_peak",
    "lunch",
    "afternoon_valley",
    "afternoon_peak",
    "night_valley",
    "night",
    "metro_750m",
    "log_working_pop",
    "rel_educ",
];

pub const INTERACTION: usize = 3;
const CORE_COLUMNS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Observed,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmeMethod {
    /// `β_k · mean(μ̂)`.
    #[default]
    Continuous,
    /// `mean(μ̂ | x_k = 1) − mean(μ̂ | x_k = 0)` for a binary column.
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub include_demographics: bool,
    pub covariance: CovarianceKind,
    #[serde(default)]
    pub use_offset: bool,
    #[serde(default)]
    pub ame: AmeMethod,
}

impl ModelSpec {
    /// Full controls with observed-information standard errors; the profile
    /// behind the DiD summary tables.
    pub fn headline() -> Self {
        ModelSpec {
            name: "headline".into(),
            include_demographics: true,
            covariance: CovarianceKind::Observed,
            use_offset: false,
            ame: AmeMethod::Continuous,
        }
    }

    /// Robustness baseline: no demographic controls, zone-clustered errors.
    pub fn model1() -> Self {
        ModelSpec {
            name: "model1".into(),
            include_demographics: false,
            covariance: CovarianceKind::Clustered,
            use_offset: false,
            ame: AmeMethod::Continuous,
        }
    }

    /// Model 1 plus the demographic controls.
    pub fn model2() -> Self {
        ModelSpec {
            name: "model2".into(),
            include_demographics: true,
            covariance: CovarianceKind::Clustered,
            use_offset: false,
            ame: AmeMethod::Continuous,
        }
    }
}

/// Zone-level regressors, indexed like the zone set.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneCovariates {
    pub zone_ids: Vec<String>,
    pub metro_lines: Vec<f64>,
    pub working_pop: Vec<f64>,
    pub educ_years: Vec<f64>,
}

impl ZoneCovariates {
    pub fn from_features(features: &FeatureTable, metro_lines: Vec<f64>) -> Self {
        ZoneCovariates {
            zone_ids: features.zone_ids.clone(),
            metro_lines,
            working_pop: features.working_population.clone(),
            educ_years: features.column(Feature::AvgEducYears),
        }
    }
}

/// Row-major regressors with response, cluster ids and optional offset.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    n: usize,
    k: usize,
    x: Vec<f64>,
    pub y: Vec<f64>,
    pub offset: Option<Vec<f64>>,
    pub clusters: Vec<usize>,
}

impl DesignMatrix {
    /// Every row its own cluster, no offset.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let k = names.len();
        if rows.len() != y.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows for {} responses",
                rows.len(),
                y.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::InvalidInput(format!(
                "row of length {} for {k} columns",
                r.len()
            )));
        }
        if y.iter()
            .any(|v| !(v.is_finite() && *v >= 0.0 && v.fract() == 0.0))
        {
            return Err(Error::InvalidInput(
                "responses must be non-negative integers".into(),
            ));
        }
        Ok(DesignMatrix {
            names,
            n: rows.len(),
            k,
            x: rows.iter().flatten().copied().collect(),
            clusters: (0..rows.len()).collect(),
            y,
            offset: None,
        })
    }

    pub fn with_clusters(mut self, clusters: Vec<usize>) -> Self {
        assert_eq!(clusters.len(), self.n);
        self.clusters = clusters;
        self
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        assert_eq!(offset.len(), self.n);
        self.offset = Some(offset);
        self
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Copy without one column.
    pub fn drop_column(&self, col: usize) -> DesignMatrix {
        let rows: Vec<Vec<f64>> = (0..self.n)
            .map(|i| {
                let mut r = self.row(i).to_vec();
                r.remove(col);
                r
            })
            .collect();
        let mut names = self.names.clone();
        names.remove(col);
        DesignMatrix {
            names,
            n: self.n,
            k: self.k - 1,
            x: rows.concat(),
            y: self.y.clone(),
            offset: self.offset.clone(),
            clusters: self.clusters.clone(),
        }
    }

    fn eta(&self, beta: &[f64], i: usize) -> f64 {
        let lin: f64 = self.row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
        match &self.offset {
            Some(o) => lin + o[i],
            None => lin,
        }
    }

    fn mu(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.eta(beta, i).exp()).collect()
    }
}

fn day_column(d: DayType) -> Option<usize> {
    match d {
        DayType::MonThu => None,
        DayType::Friday => Some(4),
        DayType::Saturday => Some(5),
        DayType::Sunday => Some(6),
    }
}

fn block_column(b: TimeBlock) -> Option<usize> {
    match b {
        TimeBlock::MorningValley => None,
        TimeBlock::MorningPeak => Some(7),
        TimeBlock::Lunch => Some(8),
        TimeBlock::AfternoonValley => Some(9),
        TimeBlock::AfternoonPeak => Some(10),
        TimeBlock::NightValley => Some(11),
        TimeBlock::Night => Some(12),
    }
}

/// Builds `[1, treat, post, treat×post, day dummies, block dummies, metro,
/// (log_wpop, rel_educ)]` for one mode of a region panel. Control columns
/// that are constant in the panel (absent dummies, a region without metro)
/// are dropped with a warning; the four DiD columns are always kept.
pub fn build_design_matrix(
    panel: &RegionPanel,
    mode: Mode,
    spec: &ModelSpec,
    cov: &ZoneCovariates,
) -> Result<(DesignMatrix, Vec<Warning>)> {
    let records: Vec<_> = panel
        .records
        .iter()
        .filter(|r| r.record.mode == mode)
        .collect();
    let zones: BTreeSet<usize> = records.iter().map(|r| r.zone).collect();
    for &z in &zones {
        if !cov.metro_lines[z].is_finite() {
            return Err(Error::MissingCovariate {
                covariate: "metro_750m",
                zone: cov.zone_ids[z].clone(),
            });
        }
        if spec.include_demographics {
            let w = cov.working_pop[z];
            if w.is_nan() {
                return Err(Error::MissingCovariate {
                    covariate: "working_pop",
                    zone: cov.zone_ids[z].clone(),
                });
            }
            if !(w > 0.0) {
                return Err(Error::NonPositiveWorkingPop(cov.zone_ids[z].clone()));
            }
            if !cov.educ_years[z].is_finite() {
                return Err(Error::MissingCovariate {
                    covariate: "avg_educ_years",
                    zone: cov.zone_ids[z].clone(),
                });
            }
        }
    }
    let educ_mean = if zones.is_empty() {
        0.0
    } else {
        zones.iter().map(|&z| cov.educ_years[z]).sum::<f64>() / zones.len() as f64
    };
    let width = if spec.include_demographics { 16 } else { 14 };
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let mut row = vec![0.0; width];
        row[0] = 1.0;
        row[1] = f64::from(u8::from(r.treatment));
        row[2] = f64::from(u8::from(r.post));
        row[3] = row[1] * row[2];
        if let Some(c) = day_column(r.record.day_type) {
            row[c] = 1.0;
        }
        if let Some(c) = block_column(r.record.time_block) {
            row[c] = 1.0;
        }
        row[13] = cov.metro_lines[r.zone];
        if spec.include_demographics {
            row[14] = cov.working_pop[r.zone].ln();
            row[15] = cov.educ_years[r.zone] - educ_mean;
        }
        rows.push(row);
    }
    let mut keep: Vec<usize> = (0..CORE_COLUMNS).collect();
    let mut warnings = Vec::new();
    for c in CORE_COLUMNS..width {
        let first = rows.first().map_or(0.0, |r| r[c]);
        if rows.iter().any(|r| r[c] != first) {
            keep.push(c);
        } else {
            warnings.push(Warning::ConstantColumn {
                column: COLUMN_NAMES[c].to_string(),
            });
        }
    }
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|r| keep.iter().map(|&c| r[c]).collect())
        .collect();
    let names = keep.iter().map(|&c| COLUMN_NAMES[c].to_string()).collect();
    let y = records.iter().map(|r| r.record.count as f64).collect();
    let mut dm = DesignMatrix::from_rows(names, &rows, y)?
        .with_clusters(records.iter().map(|r| r.zone).collect());
    if spec.use_offset {
        dm = dm.with_offset(
            records
                .iter()
                .map(|r| r.record.exposure_hours.ln())
                .collect(),
        );
    }
    Ok((dm, warnings))
}

// ---------------------------------------------------------------------------
// special functions in forms that stay accurate as alpha -> 0

const DIRECT_SUM_LIMIT: f64 = 64.0;
const ASYMPTOTIC_R: f64 = 1e5;

/// `ln(1 + x) − x`.
fn ln1p_minus_x(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // Σ_{k≥2} (−1)^{k+1} x^k / k, truncated below 1e-20 relative
        let mut sum = 0.0;
        let mut p = x;
        for k in 2..=12 {
            p *= -x;
            sum += p / k as f64;
        }
        sum
    } else {
        x.ln_1p() - x
    }
}

/// `lnΓ(y + 1/α) − lnΓ(1/α) + y ln α`.
fn lgamma_ratio(y: f64, alpha: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let r = 1.0 / alpha;
    if y < DIRECT_SUM_LIMIT {
        (0..y as u32).map(|j| (alpha * j as f64).ln_1p()).sum()
    } else if r >= ASYMPTOTIC_R {
        let x = alpha * y;
        r * ln1p_minus_x(x) + (y - 0.5) * x.ln_1p() + (1.0 / (r + y) - 1.0 / r) / 12.0
    } else {
        ln_gamma(y + r) - ln_gamma(r) + y * alpha.ln()
    }
}

/// `ψ(y + r) − ψ(r)`.
fn digamma_diff(y: f64, r: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else if y < DIRECT_SUM_LIMIT {
        (0..y as u32).map(|j| 1.0 / (r + j as f64)).sum()
    } else if r >= ASYMPTOTIC_R {
        let s = r + y;
        (y / r).ln_1p() - 0.5 * (1.0 / s - 1.0 / r) - (1.0 / (s * s) - 1.0 / (r * r)) / 12.0
    } else {
        digamma(y + r) - digamma(r)
    }
}

/// ψ'(x) by upward recurrence and the asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

/// `ψ'(r) − ψ'(y + r)`.
fn trigamma_diff(y: f64, r: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else if y < DIRECT_SUM_LIMIT {
        (0..y as u32).map(|j| 1.0 / (r + j as f64).powi(2)).sum()
    } else if r >= ASYMPTOTIC_R {
        let s = r + y;
        y / (r * s)
            + 0.5 * (1.0 / (r * r) - 1.0 / (s * s))
            + (1.0 / r.powi(3) - 1.0 / s.powi(3)) / 6.0
    } else {
        trigamma(r) - trigamma(y + r)
    }
}

fn obs_loglik(y: f64, mu: f64, alpha: f64) -> f64 {
    lgamma_ratio(y, alpha) + y * mu.ln()
        - ln_gamma(y + 1.0)
        - (y + 1.0 / alpha) * (alpha * mu).ln_1p()
}

/// Per-observation derivatives of ℓ with respect to η = x·β and α.
struct ObsDerivs {
    d_eta: f64,
    d_alpha: f64,
    d_eta2: f64,
    d_eta_alpha: f64,
    d_alpha2: f64,
}

fn obs_derivs(y: f64, mu: f64, alpha: f64) -> ObsDerivs {
    let r = 1.0 / alpha;
    let q = 1.0 + alpha * mu;
    let bracket = (alpha * mu).ln_1p() - digamma_diff(y, r);
    let a2 = alpha * alpha;
    ObsDerivs {
        d_eta: (y - mu) / q,
        d_alpha: bracket / a2 + (y - mu) / (alpha * q),
        d_eta2: -mu * (1.0 + alpha * y) / (q * q),
        d_eta_alpha: -(y - mu) * mu / (q * q),
        d_alpha2: -2.0 * bracket / (a2 * alpha) + mu / (a2 * q)
            - trigamma_diff(y, r) / (a2 * a2)
            - (y - mu) * (1.0 + 2.0 * alpha * mu) / (a2 * q * q),
    }
}

/// `Σᵢ [lnΓ(yᵢ+1/α) − lnΓ(1/α) − ln yᵢ! + yᵢ ln(αμᵢ) − (yᵢ+1/α) ln(1+αμᵢ)]`.
pub fn nb_loglik(beta: &[f64], alpha: f64, dm: &DesignMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..dm.n {
        total += obs_loglik(dm.y[i], dm.eta(beta, i).exp(), alpha);
    }
    total
}

/// Poisson log-likelihood, used as the α → 0 reference.
pub fn poisson_loglik(beta: &[f64], dm: &DesignMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..dm.n {
        let eta = dm.eta(beta, i);
        let y = dm.y[i];
        total += y * eta - eta.exp() - ln_gamma(y + 1.0);
    }
    total
}

/// Gradient with respect to `(β, α)`.
pub fn nb_score(beta: &[f64], alpha: f64, dm: &DesignMatrix) -> Vec<f64> {
    let k = dm.k;
    let mut g = vec![0.0; k + 1];
    for i in 0..dm.n {
        let d = obs_derivs(dm.y[i], dm.eta(beta, i).exp(), alpha);
        for (gj, xj) in g.iter_mut().zip(dm.row(i)) {
            *gj += d.d_eta * xj;
        }
        g[k] += d.d_alpha;
    }
    g
}

/// Hessian with respect to `(β, α)`.
pub fn nb_hessian(beta: &[f64], alpha: f64, dm: &DesignMatrix) -> DMatrix<f64> {
    let k = dm.k;
    let mut h = DMatrix::zeros(k + 1, k + 1);
    for i in 0..dm.n {
        let x = dm.row(i);
        let d = obs_derivs(dm.y[i], dm.eta(beta, i).exp(), alpha);
        for a in 0..k {
            for b in 0..=a {
                h[(a, b)] += d.d_eta2 * x[a] * x[b];
            }
            h[(k, a)] += d.d_eta_alpha * x[a];
        }
        h[(k, k)] += d.d_alpha2;
    }
    h.fill_upper_triangle_with_lower_triangle();
    h
}

fn beta_block(beta: &[f64], alpha: f64, dm: &DesignMatrix) -> DMatrix<f64> {
    let k = dm.k;
    let mut h = DMatrix::zeros(k, k);
    for i in 0..dm.n {
        let x = dm.row(i);
        let mu = dm.eta(beta, i).exp();
        let w = mu * (1.0 + alpha * dm.y[i]) / (1.0 + alpha * mu).powi(2);
        for a in 0..k {
            for b in 0..=a {
                h[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    h.fill_upper_triangle_with_lower_triangle();
    h
}

fn check_rank(dm: &DesignMatrix) -> Result<()> {
    let k = dm.k;
    if dm.n <= k {
        return Err(Error::InvalidInput(format!(
            "{} observations for {k} columns",
            dm.n
        )));
    }
    let mut g = DMatrix::<f64>::zeros(k, k);
    for i in 0..dm.n {
        let x = dm.row(i);
        for a in 0..k {
            for b in 0..=a {
                g[(a, b)] += x[a] * x[b];
            }
        }
    }
    g.fill_upper_triangle_with_lower_triangle();
    let d: Vec<f64> = (0..k).map(|a| g[(a, a)]).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::RankDeficient);
    }
    let scaled = DMatrix::from_fn(k, k, |a, b| g[(a, b)] / (d[a] * d[b]).sqrt());
    let eig = scaled.symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    if !(lo > 1e-11 * hi) {
        return Err(Error::RankDeficient);
    }
    Ok(())
}

fn solve_spd(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let chol = a.clone().cholesky()?;
    Some(
        chol.solve(&DVector::from_column_slice(b))
            .as_slice()
            .to_vec(),
    )
}

fn invert_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.clone().cholesky()?.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub alpha_se: Option<f64>,
    /// Inverse observed information for β.
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub at_boundary: bool,
    pub fitted_mu: Vec<f64>,
    /// Profile log-likelihood after each outer step.
    pub loglik_trace: Vec<f64>,
    pub warnings: Vec<Warning>,
}

impl FitResult {
    pub fn se(&self, cov: &DMatrix<f64>, k: usize) -> f64 {
        cov[(k, k)].sqrt()
    }

    pub fn mean_mu(&self) -> f64 {
        self.fitted_mu.iter().sum::<f64>() / self.fitted_mu.len() as f64
    }
}

struct Inner {
    beta: Vec<f64>,
    loglik: f64,
    converged: bool,
}

/// Fisher scoring on β at fixed α with step halving.
fn fit_beta(dm: &DesignMatrix, alpha: f64, start: &[f64], opts: &FitOptions) -> Result<Inner> {
    let k = dm.k;
    let mut beta = start.to_vec();
    let mut ll = nb_loglik(&beta, alpha, dm);
    if !ll.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite log-likelihood at start".into(),
        ));
    }
    for _ in 0..opts.max_iter {
        let mut info = DMatrix::<f64>::zeros(k, k);
        let mut grad = vec![0.0; k];
        for i in 0..dm.n {
            let x = dm.row(i);
            let mu = dm.eta(&beta, i).exp();
            let q = 1.0 + alpha * mu;
            let w = mu / q;
            let s = (dm.y[i] - mu) / q;
            for a in 0..k {
                grad[a] += s * x[a];
                for b in 0..=a {
                    info[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        info.fill_upper_triangle_with_lower_triangle();
        let step = solve_spd(&info, &grad).ok_or(Error::RankDeficient)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, d)| b + t * d).collect();
            let ll_c = nb_loglik(&cand, alpha, dm);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs() {
                accepted = Some((cand, ll_c));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, ll_c)) = accepted else {
            return Ok(Inner {
                beta,
                loglik: ll,
                converged: true,
            });
        };
        let moved = step.iter().map(|d| (t * d).abs()).fold(0.0, f64::max);
        let gain = ll_c - ll;
        beta = cand;
        ll = ll_c;
        if gain.abs() < 1e-3 * opts.tol * (1.0 + ll.abs()) && moved < 1e-7 {
            return Ok(Inner {
                beta,
                loglik: ll,
                converged: true,
            });
        }
    }
    Ok(Inner {
        beta,
        loglik: ll,
        converged: false,
    })
}

/// OLS of ln(y + 0.5) on X as the starting point.
fn start_values(dm: &DesignMatrix) -> Result<Vec<f64>> {
    let k = dm.k;
    let mut g = DMatrix::<f64>::zeros(k, k);
    let mut rhs = vec![0.0; k];
    for i in 0..dm.n {
        let x = dm.row(i);
        let t = (dm.y[i] + 0.5).ln() - dm.offset.as_ref().map_or(0.0, |o| o[i]);
        for a in 0..k {
            rhs[a] += x[a] * t;
            for b in 0..=a {
                g[(a, b)] += x[a] * x[b];
            }
        }
    }
    g.fill_upper_triangle_with_lower_triangle();
    solve_spd(&g, &rhs).ok_or(Error::RankDeficient)
}

/// Profile score and curvature of ℓ in θ = ln α at the inner optimum.
fn profile_derivs(beta: &[f64], alpha: f64, dm: &DesignMatrix) -> (f64, f64) {
    let k = dm.k;
    let g = nb_score(beta, alpha, dm)[k];
    let h = nb_hessian(beta, alpha, dm);
    let hbb = -h.view((0, 0), (k, k)).into_owned();
    let hba: Vec<f64> = (0..k).map(|a| h[(k, a)]).collect();
    let correction = solve_spd(&hbb, &hba)
        .map(|v| v.iter().zip(&hba).map(|(a, b)| a * b).sum::<f64>())
        .unwrap_or(0.0);
    // d²ℓ/dα² along the profile, then the chain rule to θ
    let h_aa = h[(k, k)] + correction;
    (alpha * g, alpha * alpha * h_aa + alpha * g)
}

/// Joint maximum likelihood of (β, α): Fisher scoring on β inside a
/// safeguarded Newton/bisection search on ln α.
pub fn fit_nb(dm: &DesignMatrix, opts: &FitOptions) -> Result<FitResult> {
    check_rank(dm)?;
    let k = dm.k;
    let tol_ll = |ll: f64| opts.tol * (1.0 + ll.abs());

    let start = start_values(dm)?;
    let pois = fit_beta(dm, ALPHA_FLOOR, &start, opts)?;
    let mu = dm.mu(&pois.beta);
    let excess: f64 = dm.y.iter().zip(&mu).map(|(y, m)| (y - m).powi(2) - y).sum();

    let mut beta = pois.beta;
    let mut ll = pois.loglik;
    let mut inner_ok = pois.converged;
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = inner_ok;
    let mut at_boundary = true;
    let mut alpha = ALPHA_FLOOR;

    if excess > 0.0 {
        at_boundary = false;
        converged = false;
        let moment =
            dm.y.iter()
                .zip(&mu)
                .map(|(y, m)| (y - m).powi(2) - m)
                .sum::<f64>()
                / mu.iter().map(|m| m * m).sum::<f64>();
        let mut lo = ALPHA_FLOOR.ln();
        let mut hi: Option<f64> = None;
        let mut theta = moment.max(1e-4).ln();
        let first = fit_beta(dm, theta.exp(), &beta, opts)?;
        beta = first.beta;
        ll = first.loglik;
        inner_ok = first.converged;
        trace.push(ll);
        while iterations < opts.max_iter {
            iterations += 1;
            let (g, h) = profile_derivs(&beta, theta.exp(), dm);
            if g > 0.0 {
                lo = lo.max(theta);
            } else {
                hi = Some(hi.map_or(theta, |v: f64| v.min(theta)));
            }
            let mut proposal = if h < 0.0 {
                theta - g / h
            } else {
                theta + 2.0 * g.signum()
            };
            proposal = proposal.clamp(theta - 2.0, theta + 2.0);
            if proposal <= lo {
                proposal = 0.5 * (theta.max(lo) + lo);
                if theta <= lo {
                    proposal = lo;
                }
            }
            if let Some(hi) = hi {
                if proposal >= hi {
                    proposal = 0.5 * (theta + hi);
                }
            }
            let mut step = proposal - theta;
            let mut next = None;
            for _ in 0..40 {
                let cand = fit_beta(dm, (theta + step).exp(), &beta, opts)?;
                if cand.loglik >= ll - tol_ll(ll) {
                    next = Some(cand);
                    break;
                }
                step *= 0.5;
            }
            let Some(next) = next else {
                converged = inner_ok;
                break;
            };
            let gain = next.loglik - ll;
            theta += step;
            beta = next.beta;
            ll = next.loglik.max(ll);
            inner_ok = next.converged;
            trace.push(ll);
            if gain.abs() < tol_ll(ll) && step.abs() < 1e-6 {
                converged = inner_ok;
                break;
            }
            if theta <= ALPHA_FLOOR.ln() + 1e-12 && g <= 0.0 {
                converged = inner_ok;
                break;
            }
        }
        alpha = theta.exp();
        if alpha <= ALPHA_FLOOR * (1.0 + 1e-9) {
            at_boundary = true;
        }
    }

    let fitted_mu = dm.mu(&beta);
    let mut warnings = Vec::new();
    if fitted_mu
        .iter()
        .any(|m| !(m.is_finite() && *m > 1e-300 && *m < 1e300))
    {
        warnings.push(Warning::Separation);
    }
    let (cov, alpha_se) = if at_boundary {
        let info = beta_block(&beta, alpha, dm);
        (invert_spd(&info).ok_or(Error::RankDeficient)?, None)
    } else {
        let info = -nb_hessian(&beta, alpha, dm);
        match invert_spd(&info) {
            Some(inv) => (
                inv.view((0, 0), (k, k)).into_owned(),
                Some(inv[(k, k)].sqrt()),
            ),
            None => {
                let info = beta_block(&beta, alpha, dm);
                (invert_spd(&info).ok_or(Error::RankDeficient)?, None)
            }
        }
    };
    if !converged {
        warnings.push(Warning::NotConverged { iterations });
    }
    Ok(FitResult {
        names: dm.names.clone(),
        beta,
        alpha,
        alpha_se,
        cov,
        loglik: ll,
        n_obs: dm.n,
        converged,
        iterations,
        at_boundary,
        fitted_mu,
        loglik_trace: trace,
        warnings,
    })
}

/// Per-observation score vectors `xᵢ (yᵢ − μᵢ)/(1 + αμᵢ)`.
fn obs_scores(fit: &FitResult, dm: &DesignMatrix) -> Vec<Vec<f64>> {
    (0..dm.n)
        .map(|i| {
            let mu = fit.fitted_mu[i];
            let s = (dm.y[i] - mu) / (1.0 + fit.alpha * mu);
            dm.row(i).iter().map(|x| x * s).collect()
        })
        .collect()
}

/// Sandwich covariance clustered on `dm.clusters`, with bread the inverse
/// observed information for β and factor `G/(G−1) · (N−1)/(N−K)`.
pub fn cluster_robust_cov(fit: &FitResult, dm: &DesignMatrix) -> Result<DMatrix<f64>> {
    let k = dm.k;
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, s) in obs_scores(fit, dm).into_iter().enumerate() {
        let acc = sums.entry(dm.clusters[i]).or_insert_with(|| vec![0.0; k]);
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    let g = sums.len();
    if g < 2 {
        return Err(Error::SingleCluster);
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for s in sums.values() {
        let v = DVector::from_column_slice(s);
        meat += &v * v.transpose();
    }
    let bread = invert_spd(&beta_block(&fit.beta, fit.alpha, dm)).ok_or(Error::RankDeficient)?;
    let (gf, nf, kf) = (g as f64, dm.n as f64, k as f64);
    let factor = gf / (gf - 1.0) * (nf - 1.0) / (nf - kf);
    let v = &bread * meat * &bread * factor;
    Ok((&v + v.transpose()) * 0.5)
}

/// Average marginal effect of column `k` and its delta-method standard error.
pub fn average_marginal_effect(
    fit: &FitResult,
    dm: &DesignMatrix,
    k: usize,
    cov: &DMatrix<f64>,
    method: AmeMethod,
) -> (f64, f64) {
    let p = dm.k;
    let n = dm.n as f64;
    let (ame, grad) = match method {
        AmeMethod::Continuous => {
            let mean_mu = fit.mean_mu();
            let mut grad = vec![0.0; p];
            for i in 0..dm.n {
                for (g, x) in grad.iter_mut().zip(dm.row(i)) {
                    *g += fit.fitted_mu[i] * x;
                }
            }
            for g in &mut grad {
                *g *= fit.beta[k] / n;
            }
            grad[k] += mean_mu;
            (fit.beta[k] * mean_mu, grad)
        }
        AmeMethod::Discrete => {
            let mut diff = 0.0;
            let mut grad = vec![0.0; p];
            for i in 0..dm.n {
                let mut x1 = dm.row(i).to_vec();
                let mut x0 = x1.clone();
                x1[k] = 1.0;
                x0[k] = 0.0;
                let off = dm.offset.as_ref().map_or(0.0, |o| o[i]);
                let dot =
                    |x: &[f64]| x.iter().zip(&fit.beta).map(|(a, b)| a * b).sum::<f64>() + off;
                let (m1, m0) = (dot(&x1).exp(), dot(&x0).exp());
                diff += m1 - m0;
                for j in 0..p {
                    grad[j] += m1 * x1[j] - m0 * x0[j];
                }
            }
            for g in &mut grad {
                *g /= n;
            }
            (diff / n, grad)
        }
    };
    let gv = DVector::from_column_slice(&grad);
    let var = (gv.transpose() * cov * &gv)[(0, 0)];
    (ame, var.max(0.0).sqrt())
}

/// Two-sided normal p-value.
pub fn p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// `100 · ame / baseline`.
pub fn percent_change(ame: f64, baseline: f64) -> f64 {
    100.0 * ame / baseline
}

/// Single star at the 5% level, as in the DiD summary tables.
pub fn did_stars(p: f64) -> &'static str {
    if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// `***` / `**` / `*` at 1% / 5% / 10%, as in the coefficient tables.
pub fn coef_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DidEffect {
    pub coefficient: f64,
    pub coefficient_z: f64,
    pub ame: f64,
    pub ame_se: f64,
    pub z: f64,
    pub p: f64,
    pub baseline: f64,
    pub percent: f64,
}

impl DidEffect {
    /// `-465.81* (-23.87%*)`.
    pub fn cell(&self) -> String {
        let s = did_stars(self.p);
        format!("{:.2}{s} ({:.2}%{s})", self.ame, self.percent)
    }
}

/// Interaction effect of a fit against the cell's baseline.
pub fn did_effect(
    fit: &FitResult,
    dm: &DesignMatrix,
    cov: &DMatrix<f64>,
    method: AmeMethod,
    baseline: Option<f64>,
    cell: &str,
) -> Result<DidEffect> {
    let baseline = baseline
        .filter(|b| *b > 0.0)
        .ok_or_else(|| Error::UndefinedBaseline(cell.to_string()))?;
    let (ame, ame_se) = average_marginal_effect(fit, dm, INTERACTION, cov, method);
    let z = ame / ame_se;
    Ok(DidEffect {
        coefficient: fit.beta[INTERACTION],
        coefficient_z: fit.beta[INTERACTION] / cov[(INTERACTION, INTERACTION)].sqrt(),
        ame,
        ame_se,
        z,
        p: p_value(z),
        baseline,
        percent: percent_change(ame, baseline),
    })
}

/// Pre-period mean trips per hour per zone, by region, mode and direction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineTable {
    cells: BTreeMap<(usize, Mode, Direction), f64>,
}

impl BaselineTable {
    /// Averages record rates over the region's zones; cells whose mean is
    /// not positive stay undefined.
    pub fn compute(panel: &ObservationPanel, zones: &ZoneSet, design: &DesignAssignment) -> Self {
        let mut sums: BTreeMap<(usize, Mode, Direction), (f64, usize)> = BTreeMap::new();
        for r in panel.records().iter().filter(|r| r.period == Period::Pre) {
            let Some(region) = zones.index_of(&r.zone_id).and_then(|z| design.region[z]) else {
                continue;
            };
            let e = sums.entry((region, r.mode, r.direction)).or_default();
            e.0 += r.rate();
            e.1 += 1;
        }
        BaselineTable {
            cells: sums
                .into_iter()
                .map(|(key, (s, n))| (key, s / n as f64))
                .filter(|(_, v)| *v > 0.0)
                .collect(),
        }
    }

    pub fn get(&self, region: usize, mode: Mode, direction: Direction) -> Option<f64> {
        self.cells.get(&(region, mode, direction)).copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = ((usize, Mode, Direction), f64)> + '_ {
        self.cells.iter().map(|(k, v)| (*k, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DidRecord;
    use crate::ingest::CountRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Poisson};

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    fn nb2_sample(rng: &mut ChaCha8Rng, mu: f64, alpha: f64) -> f64 {
        let lambda = Gamma::new(1.0 / alpha, mu * alpha).unwrap().sample(rng);
        if lambda <= 0.0 {
            0.0
        } else {
            Poisson::new(lambda).unwrap().sample(rng)
        }
    }

    fn nb_fixture(seed: u64, n: usize, beta: &[f64], alpha: f64) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let mut r = vec![1.0];
            r.extend((1..beta.len()).map(|_| rng.random_range(-1.0..1.0)));
            let eta: f64 = r.iter().zip(beta).map(|(a, b)| a * b).sum();
            y.push(nb2_sample(&mut rng, eta.exp(), alpha));
            rows.push(r);
        }
        DesignMatrix::from_rows(names(beta.len()), &rows, y).unwrap()
    }

    #[test]
    fn loglik_single_zero() {
        let dm = DesignMatrix::from_rows(names(1), &[vec![1.0]], vec![0.0]).unwrap();
        assert!((nb_loglik(&[0.0], 1.0, &dm) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loglik_matches_direct_formula() {
        // direct evaluation with ln_gamma on moderate values
        for &(y, mu, alpha) in &[
            (3.0, 2.5, 0.7),
            (120.0, 80.0, 0.3),
            (0.0, 4.0, 2.0),
            (70.0, 90.0, 1e-3),
        ] {
            let r = 1.0f64 / alpha;
            let direct = ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0) + y * (alpha * mu).ln()
                - (y + r) * (1.0 + alpha * mu).ln();
            let got = obs_loglik(y, mu, alpha);
            assert!(
                (got - direct).abs() < 1e-9 * (1.0 + direct.abs()),
                "{y} {mu} {alpha}: {got} vs {direct}"
            );
        }
    }

    #[test]
    fn small_alpha_is_poisson() {
        let dm = nb_fixture(3, 200, &[2.0, 0.4], 0.3);
        let beta = [1.9, 0.35];
        let nb = nb_loglik(&beta, 1e-10, &dm);
        assert!((nb - poisson_loglik(&beta, &dm)).abs() < 1e-5);
    }

    #[test]
    fn trigamma_values() {
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn special_function_branches_agree() {
        for &r in &[2.0e4, 9.0e4, 1.1e5, 4.0e5] {
            for &y in &[64.0, 300.0, 2500.0] {
                let exact_l = ln_gamma(y + r) - ln_gamma(r) + y * (1.0 / r).ln();
                assert!(
                    (lgamma_ratio(y, 1.0 / r) - exact_l).abs() < 1e-6 * (1.0 + exact_l.abs()),
                    "{r} {y}: {} vs {exact_l}",
                    lgamma_ratio(y, 1.0 / r)
                );
                let exact_d: f64 = (0..y as u32).map(|j| 1.0 / (r + j as f64)).sum();
                assert!((digamma_diff(y, r) - exact_d).abs() < 1e-10 * exact_d);
                let exact_t: f64 = (0..y as u32).map(|j| 1.0 / (r + j as f64).powi(2)).sum();
                assert!((trigamma_diff(y, r) - exact_t).abs() < 1e-8 * exact_t);
            }
        }
    }

    #[test]
    fn score_and_hessian_match_differences() {
        let dm = nb_fixture(11, 300, &[1.5, 0.5, -0.3], 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let beta = [
                rng.random_range(1.0..2.0),
                rng.random_range(0.0..1.0),
                rng.random_range(-0.6..0.0),
            ];
            let alpha = rng.random_range(0.2..1.5);
            let g = nb_score(&beta, alpha, &dm);
            let h = nb_hessian(&beta, alpha, &dm);
            let point = |d: usize, e: f64| {
                let mut b = beta.to_vec();
                let mut a = alpha;
                if d < 3 {
                    b[d] += e;
                } else {
                    a += e;
                }
                (b, a)
            };
            for d in 0..4 {
                let e = 1e-5;
                let (bp, ap) = point(d, e);
                let (bm, am) = point(d, -e);
                let fd = (nb_loglik(&bp, ap, &dm) - nb_loglik(&bm, am, &dm)) / (2.0 * e);
                assert!(
                    (fd - g[d]).abs() <= 1e-6 * g[d].abs().max(1.0),
                    "score {d}: {fd} vs {}",
                    g[d]
                );
                let gp = nb_score(&bp, ap, &dm);
                let gm = nb_score(&bm, am, &dm);
                for c in 0..4 {
                    let fd = (gp[c] - gm[c]) / (2.0 * e);
                    assert!((fd - h[(c, d)]).abs() <= 1e-4 * h[(c, d)].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn intercept_only_is_log_mean() {
        let y = vec![0.0, 3.0, 7.0, 1.0, 12.0, 2.0, 0.0, 9.0];
        let rows = vec![vec![1.0]; y.len()];
        let dm = DesignMatrix::from_rows(names(1), &rows, y.clone()).unwrap();
        let fit = fit_nb(&dm, &FitOptions::default()).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((fit.beta[0] - mean.ln()).abs() < 1e-8);
        assert!(fit.converged && !fit.at_boundary);
    }

    #[test]
    fn underdispersed_data_hits_poisson_boundary() {
        let y = vec![4.0, 5.0, 4.0, 5.0, 6.0, 5.0];
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64 / 5.0]).collect();
        let dm = DesignMatrix::from_rows(names(2), &rows, y).unwrap();
        let fit = fit_nb(&dm, &FitOptions::default()).unwrap();
        assert!(fit.at_boundary && fit.alpha == ALPHA_FLOOR && fit.alpha_se.is_none());
    }

    #[test]
    fn recovers_nb2_parameters() {
        let dm = nb_fixture(1, 5000, &[1.0, 0.5], 0.5);
        let fit = fit_nb(&dm, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.beta[0] - 1.0).abs() < 0.06);
        assert!((fit.beta[1] - 0.5).abs() < 0.08);
        assert!((fit.alpha - 0.5).abs() < 0.08);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        let g = nb_score(&fit.beta, fit.alpha, &dm);
        assert!(g.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn perturbing_the_optimum_lowers_loglik() {
        let dm = nb_fixture(2, 800, &[2.0, -0.4, 0.3], 0.4);
        let fit = fit_nb(&dm, &FitOptions::default()).unwrap();
        for j in 0..3 {
            for e in [-0.01, 0.01] {
                let mut b = fit.beta.clone();
                b[j] += e;
                assert!(nb_loglik(&b, fit.alpha, &dm) < fit.loglik);
            }
        }
    }

    #[test]
    fn collinear_columns_rejected() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![1.0, i as f64, 2.0 * i as f64])
            .collect();
        let dm = DesignMatrix::from_rows(names(3), &rows, vec![1.0; 10]).unwrap();
        assert!(matches!(
            fit_nb(&dm, &FitOptions::default()),
            Err(Error::RankDeficient)
        ));
    }

    #[test]
    fn ame_single_observation() {
        let fit = FitResult {
            names: names(1),
            beta: vec![0.1],
            alpha: 0.5,
            alpha_se: None,
            cov: DMatrix::identity(1, 1),
            loglik: 0.0,
            n_obs: 1,
            converged: true,
            iterations: 0,
            at_boundary: false,
            fitted_mu: vec![10.0],
            loglik_trace: vec![],
            warnings: vec![],
        };
        let dm = DesignMatrix::from_rows(names(1), &[vec![1.0]], vec![10.0]).unwrap();
        let (ame, _) = average_marginal_effect(&fit, &dm, 0, &fit.cov, AmeMethod::Continuous);
        assert!((ame - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singleton_clusters_are_hc_sandwich() {
        let dm = nb_fixture(4, 400, &[1.2, 0.3], 0.5);
        let fit = fit_nb(&dm, &FitOptions::default()).unwrap();
        let v = cluster_robust_cov(&fit, &dm).unwrap();
        let bread = invert_spd(&beta_block(&fit.beta, fit.alpha, &dm)).unwrap();
        let mut meat = DMatrix::zeros(2, 2);
        for s in obs_scores(&fit, &dm) {
            let s = DVector::from_vec(s);
            meat += &s * s.transpose();
        }
        let n = 400.0;
        let hc = &bread * meat * &bread * (n / (n - 1.0) * (n - 1.0) / (n - 2.0));
        assert!((v - hc).abs().max() < 1e-12);
    }

    #[test]
    fn one_cluster_rejected() {
        let dm = nb_fixture(4, 100, &[1.2, 0.3], 0.5);
        let fit = fit_nb(&dm, &FitOptions::default()).unwrap();
        let dm = dm.with_clusters(vec![7; 100]);
        assert!(matches!(
            cluster_robust_cov(&fit, &dm),
            Err(Error::SingleCluster)
        ));
    }

    #[test]
    fn percent_and_stars() {
        assert!((percent_change(-465.81, 1951.40) + 23.87).abs() < 0.005);
        assert_eq!(percent_change(0.0, 12.0), 0.0);
        assert_eq!(did_stars(0.03), "*");
        assert_eq!(did_stars(0.07), "");
        assert_eq!(coef_stars(0.07), "*");
        assert_eq!(coef_stars(0.004), "***");
        assert!((p_value(1.959964) - 0.05).abs() < 1e-6);
    }

    fn did_record(
        zone: usize,
        treatment: bool,
        post: bool,
        day: DayType,
        block: TimeBlock,
    ) -> DidRecord {
        DidRecord {
            zone,
            treatment,
            post,
            record: CountRecord {
                zone_id: format!("z{zone}"),
                period: if post { Period::Post } else { Period::Pre },
                day_type: day,
                time_block: block,
                mode: Mode::Bus,
                direction: Direction::Boarding,
                count: 5,
                exposure_hours: 1.0,
            },
        }
    }

    #[test]
    fn design_columns() {
        let mut records = Vec::new();
        for z in 0..4 {
            for post in [false, true] {
                records.push(did_record(
                    z,
                    z < 2,
                    post,
                    DayType::MonThu,
                    TimeBlock::MorningValley,
                ));
                records.push(did_record(
                    z,
                    z < 2,
                    post,
                    DayType::Sunday,
                    TimeBlock::Night,
                ));
            }
        }
        let panel = RegionPanel {
            region: 0,
            role: crate::design::Role::Generation,
            records,
        };
        let cov = ZoneCovariates {
            zone_ids: (0..4).map(|z| format!("z{z}")).collect(),
            metro_lines: vec![0.0, 1.0, 0.0, 2.0],
            working_pop: vec![100.0, 200.0, 300.0, 400.0],
            educ_years: vec![12.0, 10.0, 11.0, 11.0],
        };
        let (dm, warnings) =
            build_design_matrix(&panel, Mode::Bus, &ModelSpec::model2(), &cov).unwrap();
        assert_eq!(
            dm.names,
            [
                "intercept",
                "treatment",
                "post",
                "treatment_x_post",
                "sunday",
                "night",
                "metro_750m",
                "log_working_pop",
                "rel_educ"
            ]
        );
        assert_eq!(warnings.len(), 7);
        // zone 0, pre, reference levels
        assert_eq!(
            dm.row(0),
            &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 100f64.ln(), 1.0]
        );
        // zone 0, post, sunday night
        assert_eq!(dm.row(3)[..6], [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dm.clusters[..4], [0, 0, 0, 0]);

        let mut bad = cov.clone();
        bad.working_pop[2] = 0.0;
        assert!(matches!(
            build_design_matrix(&panel, Mode::Bus, &ModelSpec::model2(), &bad),
            Err(Error::NonPositiveWorkingPop(_))
        ));
        bad.working_pop[2] = f64::NAN;
        assert!(matches!(
            build_design_matrix(&panel, Mode::Bus, &ModelSpec::model2(), &bad),
            Err(Error::MissingCovariate { .. })
        ));
        assert!(build_design_matrix(&panel, Mode::Bus, &ModelSpec::model1(), &bad).is_ok());
    }
}
