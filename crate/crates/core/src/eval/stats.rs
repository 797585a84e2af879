//! Rank-based tests: Mann-Whitney U, Kruskal-Wallis H and Dunn's post-hoc.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest combined sample size for the exact Mann-Whitney enumeration.
pub const EXACT_MAX_N: usize = 20;
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatTest {
    MannWhitneyU,
    KruskalWallis,
    DunnPosthoc,
}

impl StatTest {
    pub fn name(self) -> &'static str {
        match self {
            StatTest::MannWhitneyU => "Mann-Whitney U",
            StatTest::KruskalWallis => "Kruskal-Wallis",
            StatTest::DunnPosthoc => "Dunn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub test: StatTest,
    pub groups: Vec<String>,
    pub statistic: f64,
    pub p_value: f64,
    pub corrected: bool,
    pub exact: bool,
}

impl StatResult {
    pub fn labelled(mut self, names: &[&str]) -> Self {
        self.groups = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn significant(&self) -> bool {
        self.p_value < ALPHA
    }
}

fn default_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("g{i}")).collect()
}

/// Midranks (1-based) of `xs` and the tie term `Σ (t³ − t)`.
pub fn midranks(xs: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    Ok(())
}

fn two_sided_normal(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Two-sided test; the reported statistic is `min(U_a, U_b)`. Exact by
/// enumeration of all rank splits when `|a| + |b| <= 20`, otherwise a normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "Mann-Whitney U needs two non-empty groups".into(),
        ));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&all);
    let ra: f64 = ranks[..na].iter().sum();
    let ua = ra - (na * (na + 1)) as f64 / 2.0;
    let mu = (na * nb) as f64 / 2.0;
    let statistic = ua.min((na * nb) as f64 - ua);
    let dev = (ua - mu).abs();
    let (p_value, exact) = if n <= EXACT_MAX_N {
        let base = (na * (na + 1)) as f64 / 2.0;
        let (mut hits, mut total) = (0u64, 0u64);
        enumerate_splits(&ranks, na, 0, 0.0, &mut |s| {
            total += 1;
            if ((s - base) - mu).abs() >= dev - 1e-9 {
                hits += 1;
            }
        });
        (hits as f64 / total as f64, true)
    } else {
        let var = (na * nb) as f64 / 12.0 * ((n + 1) as f64 - ties / (n * (n - 1)) as f64);
        if var <= 0.0 {
            (1.0, false)
        } else {
            let z = (dev - 0.5).max(0.0) / var.sqrt();
            (two_sided_normal(z), false)
        }
    };
    Ok(StatResult {
        test: StatTest::MannWhitneyU,
        groups: default_labels(2),
        statistic,
        p_value,
        corrected: false,
        exact,
    })
}

fn enumerate_splits(ranks: &[f64], k: usize, start: usize, acc: f64, f: &mut impl FnMut(f64)) {
    if k == 0 {
        f(acc);
        return;
    }
    for i in start..=ranks.len() - k {
        enumerate_splits(ranks, k - 1, i + 1, acc + ranks[i], f);
    }
}

struct Pooled {
    ranks: Vec<Vec<f64>>,
    ties: f64,
    n: usize,
}

fn pool(groups: &[Vec<f64>]) -> Result<Pooled> {
    if groups.len() < 2 || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidArgument(
            "rank tests need at least two non-empty groups".into(),
        ));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    check_finite(&all)?;
    let (r, ties) = midranks(&all);
    let mut out = Vec::new();
    let mut off = 0;
    for g in groups {
        out.push(r[off..off + g.len()].to_vec());
        off += g.len();
    }
    Ok(Pooled {
        ranks: out,
        ties,
        n: all.len(),
    })
}

/// Tie-corrected H with a chi-square(k − 1) p-value.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<StatResult> {
    let pooled = pool(groups)?;
    let n = pooled.n as f64;
    let k = groups.len();
    let correction = 1.0 - pooled.ties / (n * n * n - n);
    let (statistic, p_value) = if correction <= 0.0 {
        (0.0, 1.0)
    } else {
        let s: f64 = pooled
            .ranks
            .iter()
            .map(|r| r.iter().sum::<f64>().powi(2) / r.len() as f64)
            .sum();
        let h = ((12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction).max(0.0);
        let chi = ChiSquared::new((k - 1) as f64).unwrap();
        (h, (1.0 - chi.cdf(h)).clamp(0.0, 1.0))
    };
    Ok(StatResult {
        test: StatTest::KruskalWallis,
        groups: default_labels(k),
        statistic,
        p_value,
        corrected: false,
        exact: false,
    })
}

/// Pairwise z on mean ranks, Bonferroni-corrected over `k(k−1)/2` pairs and
/// clamped to 1. Results are in `(0,1), (0,2), …, (k−2,k−1)` order.
pub fn dunn_posthoc(groups: &[Vec<f64>]) -> Result<Vec<StatResult>> {
    let pooled = pool(groups)?;
    let n = pooled.n as f64;
    let k = groups.len();
    let pairs = (k * (k - 1) / 2) as f64;
    let base_var = n * (n + 1.0) / 12.0 - pooled.ties / (12.0 * (n - 1.0));
    let mean: Vec<f64> = pooled
        .ranks
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let var = base_var * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64);
            let (z, raw) = if var > 0.0 {
                let z = (mean[i] - mean[j]) / var.sqrt();
                (z, two_sided_normal(z))
            } else {
                (0.0, 1.0)
            };
            out.push(StatResult {
                test: StatTest::DunnPosthoc,
                groups: vec![format!("g{i}"), format!("g{j}")],
                statistic: z,
                p_value: (raw * pairs).min(1.0),
                corrected: true,
                exact: false,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_small_case() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        assert!(r.exact);
        let same = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn midranks_with_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, 6.0);
    }

    #[test]
    fn kruskal_known_h() {
        let g = vec![
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ];
        let r = kruskal_wallis(&g).unwrap();
        assert!((r.statistic - 7.2).abs() < 1e-12);
        assert!((r.p_value - (-3.6f64).exp()).abs() < 1e-12);
        let same = kruskal_wallis(&[vec![2.0; 3], vec![2.0; 3]]).unwrap();
        assert_eq!((same.statistic, same.p_value), (0.0, 1.0));
    }

    #[test]
    fn dunn_identical_pair_clamps() {
        let g = vec![
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0],
            vec![10.0, 11.0, 12.0],
        ];
        let d = dunn_posthoc(&g).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].p_value, 1.0);
        assert!(d.iter().all(|r| r.p_value <= 1.0 && r.corrected));
    }
}
