//! Two-sided Wilcoxon signed-rank test on paired samples.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 12;
pub const MIN_NONZERO: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Ranks of `|d|` (1-based, tied values share their mean rank), doubled so
/// every rank is an integer.
pub fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // mean of ranks i+1..=j+1, doubled
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

fn nonzero_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect())
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let d = nonzero_differences(a, b)?;
    let n = d.len();
    if n < MIN_NONZERO {
        return Err(Error::Stats(format!("{n} non-zero differences, need at least {MIN_NONZERO}")));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let plus: u64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w2 = plus.min(total - plus);
    let statistic = w2 as f64 / 2.0;
    if n <= EXACT_MAX_N {
        // Distribution of the doubled positive-rank sum over all 2^n sign patterns.
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        for &r in &ranks {
            for s in (r as usize..=total as usize).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let extreme: u64 =
            counts.iter().enumerate().filter(|&(s, _)| (s as u64).min(total - s as u64) <= w2).map(|(_, c)| c).sum();
        let p_value = extreme as f64 / (1u64 << n) as f64;
        return Ok(WilcoxonResult { p_value, statistic, n, method: WilcoxonMethod::Exact });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p_value = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(WilcoxonResult { p_value, statistic, n, method: WilcoxonMethod::NormalApprox })
}
