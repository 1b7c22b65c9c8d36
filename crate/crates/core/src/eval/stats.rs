//! Paired significance machinery: bootstrap confidence intervals over
//! per-trigger deltas and McNemar's test on paired hit/miss outcomes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Natural log of the gamma function (Lanczos approximation, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula keeps the approximation in its sweet spot.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i as f64) + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * ((i as f64) - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma `Q(a, x)`. For one degree of freedom,
/// the chi-square survival function is `Q(1/2, chi2/2)`.
pub fn gammq(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "gammq domain");
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

/// McNemar's test with continuity correction on the discordant counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McNemarTest {
    /// Pairs where only system A was correct.
    pub b: u64,
    /// Pairs where only system B was correct.
    pub c: u64,
    pub chi2: f64,
    pub p: f64,
}

/// `chi2 = (|b - c| - 1)^2 / (b + c)`; `b + c = 0` degenerates to
/// `chi2 = 0`, `p = 1`.
pub fn mcnemar(b: u64, c: u64) -> McNemarTest {
    let n = b + c;
    let chi2 = if n == 0 {
        0.0
    } else {
        let diff = b.abs_diff(c) as f64 - 1.0;
        diff * diff / n as f64
    };
    let p = if chi2 == 0.0 {
        1.0
    } else {
        gammq(0.5, chi2 / 2.0)
    };
    McNemarTest { b, c, chi2, p }
}

/// 2x2 agreement table for two systems judged on the same triggers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairedOutcomes {
    pub both_correct: u64,
    pub both_wrong: u64,
    pub only_a: u64,
    pub only_b: u64,
}

pub fn paired_outcomes(a_hits: &[bool], b_hits: &[bool]) -> PairedOutcomes {
    assert_eq!(a_hits.len(), b_hits.len(), "paired outcome length");
    let mut t = PairedOutcomes {
        both_correct: 0,
        both_wrong: 0,
        only_a: 0,
        only_b: 0,
    };
    for (&a, &b) in a_hits.iter().zip(b_hits) {
        match (a, b) {
            (true, true) => t.both_correct += 1,
            (false, false) => t.both_wrong += 1,
            (true, false) => t.only_a += 1,
            (false, true) => t.only_b += 1,
        }
    }
    t
}

impl PairedOutcomes {
    pub fn n(&self) -> u64 {
        self.both_correct + self.both_wrong + self.only_a + self.only_b
    }

    /// `(wins, ties, losses)` from A's point of view; ties are the
    /// agreements, on either side.
    pub fn win_tie_loss(&self) -> (u64, u64, u64) {
        (self.only_a, self.both_correct + self.both_wrong, self.only_b)
    }

    /// Fraction of triggers where the two systems agree (both correct or
    /// both wrong). Empty input counts as full agreement.
    pub fn agreement(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            return 1.0;
        }
        (self.both_correct + self.both_wrong) as f64 / n as f64
    }

    pub fn mcnemar(&self) -> McNemarTest {
        mcnemar(self.only_a, self.only_b)
    }
}

/// Percentile bootstrap over per-trigger paired deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapCi {
    /// Mean of the observed deltas.
    pub mean: f64,
    /// Empirical 2.5th percentile of resampled means.
    pub lo: f64,
    /// Empirical 97.5th percentile of resampled means.
    pub hi: f64,
    pub resamples: usize,
}

/// Resamples trigger indices with replacement `resamples` times, recording
/// the mean delta of each resample; the CI bounds are the nearest-rank
/// 2.5% / 97.5% order statistics of those means. Deterministic in `seed`.
pub fn bootstrap_mean_ci(deltas: &[f64], resamples: usize, seed: u64) -> BootstrapCi {
    assert!(!deltas.is_empty(), "bootstrap needs at least one delta");
    assert!(resamples > 0, "bootstrap needs at least one resample");
    let n = deltas.len();
    let mean = deltas.iter().sum::<f64>() / n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += deltas[rng.random_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let lo_idx = ((0.025 * resamples as f64) as usize).min(resamples - 1);
    let hi_idx = ((0.975 * resamples as f64) as usize).min(resamples - 1);
    BootstrapCi {
        mean,
        lo: means[lo_idx],
        hi: means[hi_idx],
        resamples,
    }
}
