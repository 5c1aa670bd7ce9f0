use crate::error::{Error, Result};

/// Largest sample size for which the null distribution is enumerated
/// unless a method is forced.
pub const EXACT_MAX_N: usize = 25;
const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for `n <= 25`, normal approximation beyond.
    Auto,
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)?.p_value)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples have lengths {} and {}", a.len(), b.len())));
    }
    // equal values (including equal infinities) are zero differences
    let diffs: Vec<f64> = a.iter().zip(b).filter(|(x, y)| x != y).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| d.is_nan()) {
        return Err(Error::NonFinite("wilcoxon samples"));
    }
    let n = diffs.len();
    if n < MIN_N {
        return Err(Error::InsufficientSamples(n));
    }
    let (doubled, ties) = doubled_midranks(&diffs);
    let w2: u64 = diffs.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact { exact_p(&doubled, w2) } else { normal_p(n, &ties, w2) };
    Ok(WilcoxonResult { n, w_plus: w2 as f64 / 2.0, p_value, exact })
}

/// Twice the mid-ranks of `|d|` (integers) and the tie group sizes.
fn doubled_midranks(diffs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // ranks start+1..=end, doubled mean = start + 1 + end
        for &i in &order[start..end] {
            ranks[i] = (start + 1 + end) as u64;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Exact null distribution of the doubled statistic by dynamic programming
/// over the `2^n` equally likely sign assignments.
fn exact_p(doubled: &[u64], w2: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(doubled.len() as i32);
    let lower: f64 = counts[..=w2 as usize].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2 as usize..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_p(n: usize, ties: &[usize], w2: u64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let dev = ((w2 as f64 / 2.0 - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-sided p by listing every sign assignment.
    fn brute_force(doubled: &[u64], w2: u64) -> f64 {
        let n = doubled.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
            le += (s <= w2) as u64;
            ge += (s >= w2) as u64;
        }
        (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn all_positive_five() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Auto).unwrap();
        assert!(r.exact);
        assert_eq!(r.p_value, 0.0625);
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(wilcoxon_signed_rank(&b, &a).unwrap(), 0.0625);
    }

    #[test]
    fn equal_samples_are_insufficient() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::InsufficientSamples(0))));
        assert!(wilcoxon_signed_rank(&a, &a[..3]).is_err());
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(5..=12);
            // small integers force ties and zeros
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect();
            let b = vec![0.0; n];
            let diffs: Vec<f64> = a.iter().copied().filter(|d| *d != 0.0).collect();
            let Ok(r) = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Exact) else {
                assert!(diffs.len() < 5);
                continue;
            };
            let (d, _) = doubled_midranks(&diffs);
            let w2 = (2.0 * r.w_plus) as u64;
            assert_eq!(r.p_value, brute_force(&d, w2));
        }
    }

    #[test]
    fn exact_and_normal_agree_at_thirty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0) + 0.15).collect();
        let ex = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Exact).unwrap();
        let auto = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Auto).unwrap();
        assert!(!auto.exact);
        assert!((ex.p_value - auto.p_value).abs() < 0.01, "{} vs {}", ex.p_value, auto.p_value);
    }

    #[test]
    fn swap_invariant_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [6, 20, 40] {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let p = wilcoxon_signed_rank(&a, &b).unwrap();
            assert_eq!(p, wilcoxon_signed_rank(&b, &a).unwrap());
            assert!(p > 0.0 && p <= 1.0);
        }
    }
}
