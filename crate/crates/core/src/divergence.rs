//! Closed-form checks on finite discrete distributions: the optimal
//! least-squares discriminator, the generator costs it induces, and the
//! divergences those costs reduce to.
//!
//! All logarithms are natural. Points where both distributions vanish are
//! left out of every sum, and `0 · log 0 = 0`.

use std::io::{self, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::rng::{stream, substream, Rng};

/// Tolerance on the unit total mass of each vector.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("support must be non-empty")]
    EmptySupport,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{which}: entry {index} is {value}, expected a finite non-negative mass")]
    BadEntry {
        which: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{which} sums to {sum}, expected 1")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("mixing weight must lie in (0, 1), got {0}")]
    BadMixture(f64),
}

/// Data distribution `p_d` and generator distribution `p_g` on a shared
/// finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePair {
    p_d: Vec<f64>,
    p_g: Vec<f64>,
}

fn check_pmf(which: &'static str, p: &[f64]) -> Result<(), DivergenceError> {
    for (index, &value) in p.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(DivergenceError::BadEntry { which, index, value });
        }
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > MASS_TOLERANCE {
        return Err(DivergenceError::NotNormalized { which, sum });
    }
    Ok(())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), DivergenceError> {
    if a.len() != b.len() {
        return Err(DivergenceError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

impl DiscretePair {
    pub fn new(p_d: Vec<f64>, p_g: Vec<f64>) -> Result<Self, DivergenceError> {
        if p_d.is_empty() {
            return Err(DivergenceError::EmptySupport);
        }
        same_len(&p_d, &p_g)?;
        check_pmf("p_d", &p_d)?;
        check_pmf("p_g", &p_g)?;
        Ok(DiscretePair { p_d, p_g })
    }

    /// Both vectors drawn from a symmetric Dirichlet(1) on `n` points.
    pub fn random(rng: &mut Rng, n: usize) -> Self {
        assert!(n >= 1, "support must be non-empty");
        DiscretePair {
            p_d: dirichlet_ones(rng, n),
            p_g: dirichlet_ones(rng, n),
        }
    }

    pub fn support_size(&self) -> usize {
        self.p_d.len()
    }

    pub fn p_d(&self) -> &[f64] {
        &self.p_d
    }

    pub fn p_g(&self) -> &[f64] {
        &self.p_g
    }

    /// `(index, p_d, p_g)` over points carrying any mass.
    fn massive(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.p_d
            .iter()
            .zip(&self.p_g)
            .enumerate()
            .filter(|(_, (&d, &g))| d + g > 0.0)
            .map(|(i, (&d, &g))| (i, d, g))
    }
}

fn dirichlet_ones(rng: &mut Rng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|x| x / total).collect()
}

/// `D*(x) = (b·p_d + a·p_g) / (p_d + p_g)`; `None` where both masses vanish.
pub fn optimal_discriminator(pair: &DiscretePair, a: f64, b: f64) -> Vec<Option<f64>> {
    pair.p_d
        .iter()
        .zip(&pair.p_g)
        .map(|(&d, &g)| (d + g > 0.0).then(|| (b * d + a * g) / (d + g)))
        .collect()
}

/// Least-squares discriminator objective
/// `Σ ½ [p_d (D - b)² + p_g (D - a)²]`.
pub fn v_discriminator(pair: &DiscretePair, d_values: &[f64], a: f64, b: f64) -> Result<f64, DivergenceError> {
    same_len(&pair.p_d, d_values)?;
    Ok(pair
        .massive()
        .map(|(i, d, g)| 0.5 * (d * (d_values[i] - b).powi(2) + g * (d_values[i] - a).powi(2)))
        .sum())
}

/// Twice the generator cost at the optimal discriminator:
/// `Σ ((b - c) p_d + (a - c) p_g)² / (p_d + p_g)`.
pub fn lsgan_generator_cost(pair: &DiscretePair, a: f64, b: f64, c: f64) -> f64 {
    pair.massive()
        .map(|(_, d, g)| ((b - c) * d + (a - c) * g).powi(2) / (d + g))
        .sum()
}

/// Pearson χ² of `q` from `p`, `Σ (q - p)² / p`, over points with `p > 0`.
/// Infinite when `q` has mass where `p` has none. The arguments may be
/// unnormalized measures.
pub fn pearson_chi2(p: &[f64], q: &[f64]) -> Result<f64, DivergenceError> {
    same_len(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total += (qi - pi).powi(2) / pi;
        } else if qi > 0.0 {
            return Ok(f64::INFINITY);
        }
    }
    Ok(total)
}

/// `|2C(G) at (a, b, c) = (-1, 1, 0)  -  χ²(p_d + p_g ‖ 2 p_g)|`.
pub fn verify_theorem1(pair: &DiscretePair) -> f64 {
    let cost = lsgan_generator_cost(pair, -1.0, 1.0, 0.0);
    let chi2 = chi2_mixture(pair);
    (cost - chi2).abs()
}

/// `χ²_Pearson(p_d + p_g ‖ 2 p_g)`.
pub fn chi2_mixture(pair: &DiscretePair) -> f64 {
    let p: Vec<f64> = pair.p_d.iter().zip(&pair.p_g).map(|(d, g)| d + g).collect();
    let q: Vec<f64> = pair.p_g.iter().map(|g| 2.0 * g).collect();
    pearson_chi2(&p, &q).expect("equal lengths")
}

/// `KL(p ‖ q) = Σ p ln(p / q)`; infinite where `q = 0 < p`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64, DivergenceError> {
    same_len(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// `(1 - π) KL(p ‖ m) + π KL(q ‖ m)` with `m = π p + (1 - π) q`.
pub fn js_pi(p: &[f64], q: &[f64], pi: f64) -> Result<f64, DivergenceError> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(DivergenceError::BadMixture(pi));
    }
    same_len(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| pi * a + (1.0 - pi) * b).collect();
    Ok((1.0 - pi) * kl(p, &m)? + pi * kl(q, &m)?)
}

pub fn js(p: &[f64], q: &[f64]) -> Result<f64, DivergenceError> {
    js_pi(p, q, 0.5)
}

/// Regular GAN generator cost at its optimal discriminator
/// `D* = p_d / (p_d + p_g)`: `E_pd[ln D*] + E_pg[ln(1 - D*)]`.
pub fn gan_generator_cost(pair: &DiscretePair) -> f64 {
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.ln() };
    pair.massive()
        .map(|(_, d, g)| {
            let opt = d / (d + g);
            xlogy(d, opt) + xlogy(g, 1.0 - opt)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroForcingReport {
    /// `KL(p_g ‖ p_d)`
    pub kl_g_d: f64,
    /// `χ²_Pearson(p_d + p_g ‖ 2 p_g)`
    pub chi2: f64,
    pub kl_infinite: bool,
    pub chi2_finite: bool,
}

/// Contrasts the reverse KL, infinite whenever `p_g` puts mass where `p_d`
/// has none, with the least-squares χ² objective, which stays finite.
pub fn zero_forcing_probe(pair: &DiscretePair) -> ZeroForcingReport {
    let kl_g_d = kl(&pair.p_g, &pair.p_d).expect("equal lengths");
    let chi2 = chi2_mixture(pair);
    ZeroForcingReport {
        kl_g_d,
        chi2,
        kl_infinite: kl_g_d.is_infinite(),
        chi2_finite: chi2.is_finite(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremRow {
    pub n: usize,
    pub seed: u64,
    pub cost: f64,
    pub chi2: f64,
    pub abs_diff: f64,
}

/// Random pair number `i` uses seed `base_seed + i`; its support size is drawn
/// uniformly from `min_n..=max_n`.
pub fn random_pair(seed: u64, min_n: usize, max_n: usize) -> DiscretePair {
    let mut rng = substream(seed, stream::PAIRS);
    let n = rng.random_range(min_n..=max_n);
    DiscretePair::random(&mut rng, n)
}

/// One row per random pair comparing `2C(G)` with the χ² form.
pub fn theorem_table(trials: usize, base_seed: u64, min_n: usize, max_n: usize) -> Vec<TheoremRow> {
    (0..trials as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let pair = random_pair(seed, min_n, max_n);
            let cost = lsgan_generator_cost(&pair, -1.0, 1.0, 0.0);
            let chi2 = chi2_mixture(&pair);
            TheoremRow {
                n: pair.support_size(),
                seed,
                cost,
                chi2,
                abs_diff: (cost - chi2).abs(),
            }
        })
        .collect()
}

pub fn write_theorem_csv(rows: &[TheoremRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "n,seed,cost,chi2,abs_diff")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.n, r.seed, r.cost, r.chi2, r.abs_diff)?;
    }
    Ok(())
}
