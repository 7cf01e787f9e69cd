//! Pairwise bounds on the smoothed class probability at a neighbour `x̃`
//! given its value `μ` at `x`.
//!
//! Both bounds are greedy solutions of a bounded knapsack over the masks of
//! `x` that retain only tokens of a longest common subsequence `z⋆`. Items are
//! grouped by the number of retained tokens `i ∈ 0..=N` (`N = |z⋆|`); there are
//! `C(N, i)` of each size. The lower bound fills the cheapest sizes first up to
//! a threshold `H*`, then takes as many size-`H*` items as fit on the grid
//! `1 / C(N, H*)`. The upper bound is the mirror image, rounded up.

use crate::error::{Error, Result};
use crate::numeric::{choose_exact, ln_choose, Accumulator};

/// Largest binomial coefficient for which the grid is applied exactly.
const EXACT_GRID_LIMIT: u128 = 1 << 53;

/// Distance, in grid cells, within which a count is treated as an exact
/// multiple. Absolute so that snapping moves a bound by at most this
/// fraction of one cell however fine the grid.
const GRID_SNAP: f64 = 1e-9;

/// Lengths and deletion rates describing the pair `(x, x̃)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairwiseGeometry {
    pub len_x: usize,
    pub len_xp: usize,
    pub len_lcs: usize,
    pub psi: f64,
    pub psi_p: f64,
}

impl PairwiseGeometry {
    pub fn new(len_x: usize, len_xp: usize, len_lcs: usize, psi: f64, psi_p: f64) -> Result<Self> {
        if len_lcs > len_x.min(len_xp) {
            return Err(Error::invalid(format!(
                "LCS length {len_lcs} exceeds min(|x| = {len_x}, |x̃| = {len_xp})"
            )));
        }
        for (name, p) in [("psi", psi), ("psi_p", psi_p)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} must lie in [0, 1)")));
            }
        }
        Ok(PairwiseGeometry {
            len_x,
            len_xp,
            len_lcs,
            psi,
            psi_p,
        })
    }

    /// The identity geometry `x̃ = x`.
    pub fn identity(len: usize, psi: f64) -> Result<Self> {
        PairwiseGeometry::new(len, len, len, psi, psi)
    }

    /// `ρ(ψ, ψ̃) = ψ(1 - ψ̃) / (ψ̃(1 - ψ))`, the per-retained-token value/weight ratio.
    pub fn rho(&self) -> f64 {
        self.psi * (1.0 - self.psi_p) / (self.psi_p * (1.0 - self.psi))
    }

    fn deleted_x(&self) -> usize {
        self.len_x - self.len_lcs
    }

    fn deleted_xp(&self) -> usize {
        self.len_xp - self.len_lcs
    }
}

/// `μ` together with the geometry it is transported across.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    pub mu: f64,
    pub geometry: PairwiseGeometry,
}

impl BoundInputs {
    pub fn new(mu: f64, geometry: PairwiseGeometry) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::invalid(format!("mu = {mu} is not a probability")));
        }
        Ok(BoundInputs { mu, geometry })
    }

    /// `W = μ - 1 + ψ^(|x| - N)`: the mass of class `y` at `x` that must sit on
    /// masks retaining only LCS tokens.
    pub fn required_weight(&self) -> f64 {
        let g = &self.geometry;
        self.mu - 1.0 + pow(g.psi, g.deleted_x())
    }
}

fn pow(p: f64, a: usize) -> f64 {
    if a == 0 {
        1.0
    } else {
        p.powf(a as f64)
    }
}

/// `C(n, k) (1 - p)^k p^(n - k)`: retaining exactly `k` of `n` tokens when
/// each is deleted with probability `p`.
pub fn binom_pmf(n: usize, p: f64, k: usize) -> Result<f64> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    Ok(retain_pmf(n, p, k))
}

fn retain_pmf(n: usize, p: f64, k: usize) -> f64 {
    if p <= 0.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    // An exact coefficient keeps the relative error near machine precision;
    // lgamma alone loses about two digits at n ~ 100.
    if let Some(c) = choose_exact(n, k) {
        let powers = (1.0 - p).powf(k as f64) * p.powf((n - k) as f64);
        if powers >= f64::MIN_POSITIVE {
            return c as f64 * powers;
        }
    }
    let mut ln = ln_choose(n, k);
    if k > 0 {
        ln += k as f64 * (-p).ln_1p();
    }
    if n > k {
        ln += (n - k) as f64 * p.ln();
    }
    ln.exp()
}

fn pmf_table(n: usize, p: f64) -> Vec<f64> {
    (0..=n).map(|k| retain_pmf(n, p, k)).collect()
}

/// Smallest `h` with `Σ_{i ≤ h} pmf[i] ≥ target`, or the last index if
/// rounding keeps the cumulative sum short of it.
fn prefix_threshold(pmf: &[f64], target: f64) -> usize {
    let mut acc = Accumulator::default();
    for (h, &p) in pmf.iter().enumerate() {
        acc.add(p);
        if acc.value() >= target {
            return h;
        }
    }
    pmf.len() - 1
}

/// Largest `h` with `Σ_{i ≥ h} pmf[i] ≥ target`, falling back to 0.
fn suffix_threshold(pmf: &[f64], target: f64) -> usize {
    let mut acc = Accumulator::default();
    for h in (0..pmf.len()).rev() {
        acc.add(pmf[h]);
        if acc.value() >= target {
            return h;
        }
    }
    0
}

/// Which end of the size range the greedy fill starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fill {
    /// Sizes `0..H*` are taken in full.
    Prefix,
    /// Sizes `H*+1..=N` are taken in full.
    Suffix,
}

impl Fill {
    fn threshold(self, pmf: &[f64], target: f64) -> usize {
        match self {
            Fill::Prefix => prefix_threshold(pmf, target),
            Fill::Suffix => suffix_threshold(pmf, target),
        }
    }

    fn full_range(self, h: usize, n: usize) -> std::ops::Range<usize> {
        match self {
            Fill::Prefix => 0..h,
            Fill::Suffix => h + 1..n + 1,
        }
    }
}

fn range_sum(pmf: &[f64], range: std::ops::Range<usize>) -> f64 {
    let mut acc = Accumulator::default();
    for &p in &pmf[range] {
        acc.add(p);
    }
    acc.value()
}

#[derive(Clone, Copy)]
enum Rounding {
    Down,
    Up,
}

/// Rounds `q` to the grid `1 / C(n, h)` in the given direction.
///
/// When the coefficient is too large for the grid to be represented, the
/// rounding is replaced by a shift of one grid cell, which errs in the same
/// direction.
fn grid_round(q: f64, n: usize, h: usize, dir: Rounding) -> f64 {
    match choose_exact(n, h) {
        Some(c) if c <= EXACT_GRID_LIMIT => {
            let c = c as f64;
            let units = q * c;
            let nearest = units.round();
            let snapped = if (units - nearest).abs() <= GRID_SNAP {
                nearest
            } else {
                match dir {
                    Rounding::Down => units.floor(),
                    Rounding::Up => units.ceil(),
                }
            };
            snapped / c
        }
        _ => {
            let v = (-ln_choose(n, h)).exp();
            match dir {
                Rounding::Down => q - v,
                Rounding::Up => q + v,
            }
        }
    }
}

fn lower_fill(g: &PairwiseGeometry) -> Fill {
    if g.psi >= g.psi_p {
        Fill::Prefix
    } else {
        Fill::Suffix
    }
}

fn upper_fill(g: &PairwiseGeometry) -> Fill {
    if g.psi > g.psi_p {
        Fill::Suffix
    } else {
        Fill::Prefix
    }
}

/// Threshold `H*` for the lower bound, or `None` when `W ≤ 0` and the bound
/// is trivially zero.
pub fn threshold_lb(inputs: &BoundInputs) -> Option<usize> {
    let w = inputs.required_weight();
    if w <= 0.0 {
        return None;
    }
    let g = &inputs.geometry;
    let pmf = pmf_table(g.len_lcs, g.psi);
    Some(lower_fill(g).threshold(&pmf, w))
}

/// Threshold `H*` for the upper bound; the target is `μ` itself.
pub fn threshold_ub(inputs: &BoundInputs) -> usize {
    let g = &inputs.geometry;
    let pmf = pmf_table(g.len_lcs, g.psi);
    upper_fill(g).threshold(&pmf, inputs.mu)
}

/// Lower bound on the smoothed probability of the class at `x̃`, valid for
/// every base classifier whose smoothed probability at `x` is `μ`.
pub fn pairwise_lb(inputs: &BoundInputs) -> f64 {
    let g = &inputs.geometry;
    let w = inputs.required_weight();
    if w <= 0.0 {
        return 0.0;
    }
    let n = g.len_lcs;
    let fill = lower_fill(g);
    let pmf_x = pmf_table(n, g.psi);
    let pmf_xp = pmf_table(n, g.psi_p);
    let h = fill.threshold(&pmf_x, w);
    let range = fill.full_range(h, n);

    let residual = w - range_sum(&pmf_x, range.clone());
    let frac = if pmf_x[h] > 0.0 {
        grid_round(residual / pmf_x[h], n, h, Rounding::Down).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let inner = range_sum(&pmf_xp, range) + pmf_xp[h] * frac;
    let prefactor = pow(g.psi_p, g.deleted_xp()) / pow(g.psi, g.deleted_x());
    (prefactor * inner).clamp(0.0, 1.0)
}

/// Upper bound on the smoothed probability of the class at `x̃`.
pub fn pairwise_ub(inputs: &BoundInputs) -> f64 {
    let g = &inputs.geometry;
    let mu = inputs.mu;
    if mu >= 1.0 {
        return 1.0;
    }
    let denom = pow(g.psi, g.deleted_x());
    if denom <= 0.0 {
        return 1.0;
    }
    let n = g.len_lcs;
    let fill = upper_fill(g);
    let pmf_x = pmf_table(n, g.psi);
    let pmf_xp = pmf_table(n, g.psi_p);
    let h = fill.threshold(&pmf_x, mu);
    let range = fill.full_range(h, n);

    let residual = mu - range_sum(&pmf_x, range.clone());
    let frac = if pmf_x[h] > 0.0 {
        grid_round(residual / pmf_x[h], n, h, Rounding::Up).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let inner = range_sum(&pmf_xp, range) + pmf_xp[h] * frac;
    let kept_xp = pow(g.psi_p, g.deleted_xp());
    let value = kept_xp / denom * inner + (1.0 - kept_xp);
    value.clamp(0.0, 1.0)
}

/// Closed-form lower bound for a constant deletion rate.
///
/// Equals `p^(|x̃|-|x|) W - (1-p)^H* p^(|x̃|-|x|+N-H*)`, obtained from
/// [`pairwise_lb`] with `ψ = ψ̃ = p` by replacing the gridded floor with
/// `⌊a⌋ ≥ a - 1`. Never larger than the gridded bound.
pub fn fixed_rate_lb(mu: f64, len_x: usize, len_xp: usize, len_lcs: usize, p_del: f64) -> f64 {
    debug_assert!(len_lcs <= len_x.min(len_xp));
    let w = mu - 1.0 + pow(p_del, len_x - len_lcs);
    if w <= 0.0 {
        return 0.0;
    }
    let pmf = pmf_table(len_lcs, p_del);
    let h = prefix_threshold(&pmf, w);
    let shift = len_xp as f64 - len_x as f64;
    let ln_p = p_del.ln();
    let slack_exp = shift + (len_lcs - h) as f64;
    let mut ln_slack = slack_exp * ln_p;
    if h > 0 {
        ln_slack += h as f64 * (-p_del).ln_1p();
    }
    let value = (shift * ln_p).exp() * w - ln_slack.exp();
    value.clamp(0.0, 1.0)
}

/// The term separating [`fixed_rate_lb`] from the gridded bound:
/// `(1-p)^H* p^(|x̃|-|x|+N-H*)`, or 0 when the bound is trivial.
pub fn fixed_rate_gap_bound(mu: f64, len_x: usize, len_xp: usize, len_lcs: usize, p_del: f64) -> f64 {
    let w = mu - 1.0 + pow(p_del, len_x - len_lcs);
    if w <= 0.0 {
        return 0.0;
    }
    let pmf = pmf_table(len_lcs, p_del);
    let h = prefix_threshold(&pmf, w);
    let e = len_xp as f64 - len_x as f64 + (len_lcs - h) as f64;
    let mut ln = e * p_del.ln();
    if h > 0 {
        ln += h as f64 * (-p_del).ln_1p();
    }
    ln.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(mu: f64, lx: usize, lxp: usize, n: usize, psi: f64, psi_p: f64) -> BoundInputs {
        BoundInputs::new(mu, PairwiseGeometry::new(lx, lxp, n, psi, psi_p).unwrap()).unwrap()
    }

    /// Brute force: sum the probability of every outcome with exactly `k`
    /// retained tokens.
    fn pmf_by_outcomes(n: usize, p: f64, k: usize) -> f64 {
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (1.0 - p).powi(m.count_ones() as i32) * p.powi((n as u32 - m.count_ones()) as i32))
            .sum()
    }

    #[test]
    fn pmf_examples() {
        assert!((binom_pmf(2, 0.5, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((binom_pmf(3, 0.9, 0).unwrap() - 0.729).abs() < 1e-15);
        assert!((binom_pmf(5, 0.7, 2).unwrap() - pmf_by_outcomes(5, 0.7, 2)).abs() < 1e-14);
        assert!((binom_pmf(5, 0.7, 2).unwrap() - 0.3087).abs() < 1e-12);
        assert!(binom_pmf(3, 0.5, 4).is_err());
        assert_eq!(binom_pmf(4, 0.0, 4).unwrap(), 1.0);
        assert_eq!(binom_pmf(4, 1.0, 0).unwrap(), 1.0);
        assert_eq!(binom_pmf(4, 1.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn pmf_normalizes() {
        for p in [0.01, 0.5, 0.9, 0.99] {
            for n in [0, 1, 7, 100, 731, 2000] {
                let total = crate::numeric::compensated_sum((0..=n).map(|k| binom_pmf(n, p, k).unwrap()));
                assert!((total - 1.0).abs() < 1e-10, "n {n} p {p}: {total}");
            }
        }
    }

    #[test]
    fn threshold_lb_examples() {
        assert_eq!(threshold_lb(&inputs(1.0, 3, 2, 2, 0.9, 0.9)), Some(1));
        assert_eq!(threshold_lb(&inputs(0.0, 3, 2, 2, 0.9, 0.9)), None);
        assert_eq!(threshold_lb(&inputs(1.0, 5, 5, 5, 0.7, 0.5)), Some(5));
    }

    #[test]
    fn threshold_ub_examples() {
        assert_eq!(threshold_ub(&inputs(0.0, 4, 4, 4, 0.5, 0.7)), 0);
        assert_eq!(threshold_ub(&inputs(1.0, 4, 4, 4, 0.5, 0.7)), 4);
        assert_eq!(threshold_ub(&inputs(0.9, 2, 2, 2, 0.9, 0.95)), 1);
    }

    #[test]
    fn lb_examples() {
        let v = pairwise_lb(&inputs(1.0, 3, 2, 2, 0.9, 0.9));
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        assert_eq!(pairwise_lb(&inputs(0.0, 3, 2, 2, 0.9, 0.9)), 0.0);

        let inp = inputs(0.99, 10, 10, 10, 0.9, 0.9);
        let lb = pairwise_lb(&inp);
        let h = threshold_lb(&inp).unwrap();
        let cell = binom_pmf(10, 0.9, h).unwrap() / choose_exact(10, h).unwrap() as f64;
        assert!(lb <= 0.99 + 1e-15 && lb >= 0.99 - cell, "{lb}");
    }

    #[test]
    fn ub_examples() {
        assert_eq!(pairwise_ub(&inputs(1.0, 4, 3, 2, 0.5, 0.7)), 1.0);

        let inp = inputs(0.5, 6, 6, 6, 0.7, 0.7);
        let ub = pairwise_ub(&inp);
        let h = threshold_ub(&inp);
        let cell = binom_pmf(6, 0.7, h).unwrap() / choose_exact(6, h).unwrap() as f64;
        assert!(ub >= 0.5 - 1e-15 && ub <= 0.5 + cell, "{ub}");

        // μ = 0: only the mass the LCS cannot see remains
        let ub = pairwise_ub(&inputs(0.0, 3, 4, 3, 0.7, 0.7));
        assert!((ub - 0.3).abs() < 1e-12, "{ub}");
    }

    #[test]
    fn fixed_rate_examples() {
        let f = fixed_rate_lb(1.0, 3, 2, 2, 0.9);
        assert!((f - 0.9).abs() < 1e-12, "{f}");
        assert_eq!(fixed_rate_lb(0.0, 3, 2, 2, 0.9), 0.0);
        let a = pairwise_lb(&inputs(0.99, 200, 200, 200, 0.9, 0.9));
        let b = fixed_rate_lb(0.99, 200, 200, 200, 0.9);
        assert!(a >= b && a - b < 1e-6, "{a} {b}");
    }

    #[test]
    fn grid_fallback_is_one_cell() {
        // C(80, 40) > 2^53
        let q = 0.3;
        let v = (-ln_choose(80, 40)).exp();
        assert_eq!(grid_round(q, 80, 40, Rounding::Down), q - v);
        assert_eq!(grid_round(q, 80, 40, Rounding::Up), q + v);
        assert_eq!(grid_round(0.49, 2, 1, Rounding::Down), 0.0);
        assert_eq!(grid_round(0.51, 2, 1, Rounding::Up), 1.0);
        assert_eq!(grid_round(0.09 / 0.18, 2, 1, Rounding::Down), 0.5);
    }

    #[test]
    fn geometry_validation() {
        assert!(PairwiseGeometry::new(3, 2, 3, 0.5, 0.5).is_err());
        assert!(PairwiseGeometry::new(3, 3, 3, 1.0, 0.5).is_err());
        assert!(BoundInputs::new(1.5, PairwiseGeometry::identity(3, 0.5).unwrap()).is_err());
        let g = PairwiseGeometry::new(3, 3, 2, 0.5, 0.5).unwrap();
        assert!((g.rho() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_tightness() {
        for psi in [0.3, 0.5, 0.7, 0.9] {
            for len in 0..=12 {
                for step in 0..=20 {
                    let mu = step as f64 / 20.0;
                    let inp = inputs(mu, len, len, len, psi, psi);
                    let lb = pairwise_lb(&inp);
                    let ub = pairwise_ub(&inp);
                    assert!(lb <= mu + 1e-12 && ub >= mu - 1e-12, "psi {psi} len {len} mu {mu}");
                    if let Some(h) = threshold_lb(&inp) {
                        let cell = binom_pmf(len, psi, h).unwrap() / choose_exact(len, h).unwrap() as f64;
                        assert!(mu - lb <= cell + 1e-12, "psi {psi} len {len} mu {mu}: {lb}");
                    }
                }
            }
        }
    }

    #[test]
    fn monotone_in_mu() {
        let rates = [0.5, 0.7, 0.9];
        for &psi in &rates {
            for &psi_p in &rates {
                for (lx, lxp, n) in [(6, 6, 4), (5, 7, 5), (6, 4, 3), (8, 8, 8), (4, 6, 2)] {
                    let mut prev = (0.0, 0.0);
                    for step in 0..=20 {
                        let inp = inputs(step as f64 * 0.05, lx, lxp, n, psi, psi_p);
                        let cur = (pairwise_lb(&inp), pairwise_ub(&inp));
                        assert!(cur.0 >= prev.0 - 1e-15 && cur.1 >= prev.1 - 1e-15);
                        prev = cur;
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_rate_dominance_grid() {
        for p in [0.5, 0.8, 0.9, 0.95] {
            for (lx, lxp, n) in [(10, 10, 8), (10, 12, 9), (12, 10, 10), (40, 38, 37), (100, 100, 97)] {
                for step in 0..=20 {
                    let mu = step as f64 * 0.05;
                    let a = pairwise_lb(&inputs(mu, lx, lxp, n, p, p));
                    let b = fixed_rate_lb(mu, lx, lxp, n, p);
                    let gap = fixed_rate_gap_bound(mu, lx, lxp, n, p);
                    assert!(a >= b - 1e-12, "p {p} ({lx},{lxp},{n}) mu {mu}: {a} < {b}");
                    assert!(a - b <= gap + 1e-12, "p {p} ({lx},{lxp},{n}) mu {mu}: gap {} > {gap}", a - b);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn bounds_are_probabilities(
            mu in 0.0f64..=1.0,
            lx in 0usize..30,
            extra in 0usize..5,
            cut in 0usize..5,
            psi in 0.0f64..0.999,
            psi_p in 0.0f64..0.999,
        ) {
            let lxp = lx + extra;
            let n = lx.saturating_sub(cut);
            let inp = inputs(mu, lx, lxp, n, psi, psi_p);
            let lb = pairwise_lb(&inp);
            let ub = pairwise_ub(&inp);
            prop_assert!((0.0..=1.0).contains(&lb));
            prop_assert!((0.0..=1.0).contains(&ub));
            prop_assert!(lb <= ub + 1e-12);
        }
    }
}
