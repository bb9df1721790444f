//! Global Moran's I with permutation inference, and the variable screen
//! that keeps spatially clustered features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::SpatialWeights;
use crate::ingest::{Feature, FeatureTable};
use crate::warning::Warning;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// Positive autocorrelation only.
    #[default]
    Upper,
    /// Deviation from the null expectation in either direction.
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoranResult {
    pub i_value: f64,
    pub expected_i: f64,
    pub p_perm: f64,
    pub n_permutations: u64,
    pub seed: u64,
}

/// Centered values and their sum of squares, shared by the statistic and its permutations.
struct Prepared {
    z: Vec<f64>,
    scale: f64,
}

fn prepare(values: &[f64], w: &SpatialWeights) -> Result<Prepared> {
    let n = values.len();
    if n != w.n() {
        return Err(Error::InvalidInput(format!(
            "{} values for {} weight rows",
            n,
            w.n()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidInput(
            "Moran's I needs at least three zones".into(),
        ));
    }
    let s0 = w.s0();
    if !(s0 > 0.0) {
        return Err(Error::EmptyWeights);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let m2: f64 = z.iter().map(|v| v * v).sum();
    let spread = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if !(m2 > (1e-14 * spread).powi(2) * n as f64) {
        return Err(Error::DegenerateVariance);
    }
    Ok(Prepared {
        z,
        scale: n as f64 / (s0 * m2),
    })
}

fn cross_product(w: &SpatialWeights, z: &[f64], perm: Option<&[usize]>) -> f64 {
    let at = |i: usize| match perm {
        Some(p) => z[p[i]],
        None => z[i],
    };
    let mut total = 0.0;
    for i in 0..w.n() {
        let row: f64 = w.row(i).iter().map(|&(j, wij)| wij * at(j)).sum();
        total += at(i) * row;
    }
    total
}

/// `I = (n / S0) · Σᵢⱼ wᵢⱼ zᵢ zⱼ / Σᵢ zᵢ²` with `z = x − x̄`.
pub fn morans_i(values: &[f64], w: &SpatialWeights) -> Result<f64> {
    let prep = prepare(values, w)?;
    Ok(prep.scale * cross_product(w, &prep.z, None))
}

fn exceeds(tail: Tail, stat: f64, observed: f64, expected: f64) -> bool {
    let tol = 1e-12 * (1.0 + observed.abs());
    match tail {
        Tail::Upper => stat >= observed - tol,
        Tail::TwoSided => (stat - expected).abs() >= (observed - expected).abs() - tol,
    }
}

/// Random permutation stream `k` for a given seed; independent of scheduling.
pub fn permutation_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Permutation test with the upper tail.
pub fn morans_perm_test(
    values: &[f64],
    w: &SpatialWeights,
    n_perm: u64,
    seed: u64,
) -> Result<MoranResult> {
    morans_perm_test_with(values, w, n_perm, seed, Tail::Upper)
}

/// `p = (1 + #{I* at least as extreme as I}) / (n_perm + 1)`.
pub fn morans_perm_test_with(
    values: &[f64],
    w: &SpatialWeights,
    n_perm: u64,
    seed: u64,
    tail: Tail,
) -> Result<MoranResult> {
    if n_perm == 0 {
        return Err(Error::InvalidInput("n_perm must be positive".into()));
    }
    let prep = prepare(values, w)?;
    let n = values.len();
    let observed = prep.scale * cross_product(w, &prep.z, None);
    let expected = -1.0 / (n as f64 - 1.0);
    let stats: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut permutation_rng(seed, k));
            prep.scale * cross_product(w, &prep.z, Some(&perm))
        })
        .collect();
    let hits = stats
        .iter()
        .filter(|&&s| exceeds(tail, s, observed, expected))
        .count() as u64;
    Ok(MoranResult {
        i_value: observed,
        expected_i: expected,
        p_perm: (1 + hits) as f64 / (n_perm + 1) as f64,
        n_permutations: n_perm,
        seed,
    })
}

/// Exact reference distribution over all `n! − 1` non-identity permutations.
pub fn morans_exhaustive_test(
    values: &[f64],
    w: &SpatialWeights,
    tail: Tail,
) -> Result<MoranResult> {
    let n = values.len();
    if n > 10 {
        return Err(Error::InvalidInput(format!(
            "exhaustive enumeration limited to n <= 10 (got {n})"
        )));
    }
    let prep = prepare(values, w)?;
    let observed = prep.scale * cross_product(w, &prep.z, None);
    let expected = -1.0 / (n as f64 - 1.0);
    let mut perm: Vec<usize> = (0..n).collect();
    let (mut hits, mut total) = (0u64, 0u64);
    while next_permutation(&mut perm) {
        total += 1;
        let s = prep.scale * cross_product(w, &prep.z, Some(&perm));
        if exceeds(tail, s, observed, expected) {
            hits += 1;
        }
    }
    Ok(MoranResult {
        i_value: observed,
        expected_i: expected,
        p_perm: (1 + hits) as f64 / (total + 1) as f64,
        n_permutations: total,
        seed: 0,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub i_min: f64,
    pub p_max: f64,
    pub n_perm: u64,
    pub seed: u64,
    pub tail: Tail,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        ScreenConfig {
            i_min: 0.25,
            p_max: 0.05,
            n_perm: 999,
            seed: 0,
            tail: Tail::Upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenRow {
    pub variable: Feature,
    pub i: f64,
    pub p: f64,
    pub selected: bool,
}

/// The selection rule on its own.
pub fn passes_screen(i: f64, p: f64, cfg: &ScreenConfig) -> bool {
    i >= cfg.i_min && p <= cfg.p_max
}

/// Tests every feature column (over zones with complete rows) and keeps
/// those with `I ≥ i_min` and `p ≤ p_max`, in table order.
pub fn screen_variables(
    features: &FeatureTable,
    w: &SpatialWeights,
    cfg: &ScreenConfig,
) -> Result<(Vec<ScreenRow>, Vec<Warning>)> {
    let keep: Vec<usize> = (0..features.rows.len())
        .filter(|&z| features.complete(z))
        .collect();
    let w_sub = if keep.len() == w.n() {
        w.clone()
    } else {
        w.subset(&keep)
    };
    let mut rows = Vec::with_capacity(Feature::ALL.len());
    let mut warnings = Vec::new();
    for (k, f) in Feature::ALL.into_iter().enumerate() {
        let col: Vec<f64> = keep.iter().map(|&z| features.get(z, f)).collect();
        let seed = cfg
            .seed
            .wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match morans_perm_test_with(&col, &w_sub, cfg.n_perm, seed, cfg.tail) {
            Ok(r) => rows.push(ScreenRow {
                variable: f,
                i: r.i_value,
                p: r.p_perm,
                selected: passes_screen(r.i_value, r.p_perm, cfg),
            }),
            Err(Error::DegenerateVariance) => {
                warnings.push(Warning::ConstantColumn {
                    column: f.name().to_string(),
                });
                rows.push(ScreenRow {
                    variable: f,
                    i: f64::NAN,
                    p: f64::NAN,
                    selected: false,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((rows, warnings))
}

pub fn selected_features(rows: &[ScreenRow]) -> Vec<Feature> {
    rows.iter()
        .filter(|r| r.selected)
        .map(|r| r.variable)
        .collect()
}
