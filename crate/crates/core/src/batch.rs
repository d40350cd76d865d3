//! Conversion of a weighted design into a batch of at most `n̄⁺` experiments:
//! sieve out low-weight points, then pick the best subset.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::criteria::TwoStageContext;
use crate::error::{Error, Result};
use crate::model::{info_root, InputPoint, NoiseModel, ParametricModel, UnweightedDesign, WeightedDesign};

/// Subset counts up to this size are searched exhaustively.
pub const EXHAUSTIVE_LIMIT: u128 = 100_000;
const SIEVE_TOL: f64 = 1e-12;

fn by_weight_then_lex(a: &(f64, InputPoint), b: &(f64, InputPoint)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.lex_cmp(&b.1))
}

/// Removes support points in order of increasing weight as long as the
/// remaining total weight stays at least `min_weight`. Survivors are returned
/// once each, heaviest first.
pub fn sieve(xi: &WeightedDesign, min_weight: f64) -> UnweightedDesign {
    let mut support: Vec<(f64, InputPoint)> = xi.support().cloned().collect();
    support.sort_by(by_weight_then_lex);
    let mut remaining: f64 = support.iter().map(|(w, _)| w).sum();
    let mut start = 0;
    while start + 1 < support.len() && remaining - support[start].0 >= min_weight - SIEVE_TOL {
        remaining -= support[start].0;
        start += 1;
    }
    let mut survivors = support.split_off(start);
    survivors.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.lex_cmp(&b.1)));
    UnweightedDesign::new(survivors.into_iter().map(|(_, x)| x).collect())
}

/// `C(n, k)` saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Next `k`-combination of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

struct Scorer<'a> {
    ctx: &'a TwoStageContext,
    roots: Vec<DMatrix<f64>>,
}

impl Scorer<'_> {
    /// `Ψ(α M⁻ + (1−α) M(ξ_subset))` with uniform weights on the subset.
    fn value(&self, subset: &[usize]) -> f64 {
        let w = 1.0 / subset.len() as f64;
        self.ctx.value_mixture(subset.iter().map(|&i| (w, &self.roots[i])))
    }
}

/// Lexicographic order of the sorted point lists of two subsets.
fn subset_lex(points: &[InputPoint], a: &[usize], b: &[usize]) -> Ordering {
    let sorted = |s: &[usize]| {
        let mut v: Vec<&InputPoint> = s.iter().map(|&i| &points[i]).collect();
        v.sort_by(|x, y| x.lex_cmp(y));
        v
    };
    let (sa, sb) = (sorted(a), sorted(b));
    for (x, y) in sa.iter().zip(&sb) {
        match x.lex_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn better(points: &[InputPoint], a: (&[usize], f64), b: (&[usize], f64)) -> bool {
    match a.1.total_cmp(&b.1) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => subset_lex(points, a.0, b.0) == Ordering::Less,
    }
}

/// Exhaustive search over all `k`-subsets; returns indices and value.
fn exhaustive(scorer: &Scorer, points: &[InputPoint], k: usize) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut combos = Vec::new();
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        combos.push(c.clone());
        if !next_combination(&mut c, n) {
            break;
        }
    }
    let values: Vec<f64> = combos.par_iter().map(|s| scorer.value(s)).collect();
    let mut best = 0;
    for i in 1..combos.len() {
        if better(points, (&combos[i], values[i]), (&combos[best], values[best])) {
            best = i;
        }
    }
    (combos.swap_remove(best), values[best])
}

/// Backward elimination: repeatedly drop the point whose removal increases
/// the criterion least.
fn greedy(scorer: &Scorer, points: &[InputPoint], k: usize) -> (Vec<usize>, f64) {
    let mut current: Vec<usize> = (0..points.len()).collect();
    while current.len() > k {
        let mut candidates: Vec<Vec<usize>> = (0..current.len())
            .map(|drop| {
                let mut s = current.clone();
                s.remove(drop);
                s
            })
            .collect();
        let values: Vec<f64> = candidates.par_iter().map(|s| scorer.value(s)).collect();
        let mut best = 0;
        for i in 1..candidates.len() {
            if better(points, (&candidates[i], values[i]), (&candidates[best], values[best])) {
                best = i;
            }
        }
        current = candidates.swap_remove(best);
    }
    let v = scorer.value(&current);
    (current, v)
}

/// Which search produced a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetSearch {
    Identity,
    Exhaustive,
    Greedy,
}

/// Chooses at most `max_batch` of the survivors, minimizing the two-stage
/// criterion of the uniform design on the chosen points. The output keeps the
/// survivors' order.
pub fn select_batch<M: ParametricModel + ?Sized>(
    ctx: &TwoStageContext,
    survivors: &UnweightedDesign,
    max_batch: usize,
    model: &M,
    noise: &NoiseModel,
) -> Result<UnweightedDesign> {
    select_batch_with(ctx, survivors, max_batch, model, noise, None).map(|(d, _)| d)
}

/// As [`select_batch`], optionally forcing the search strategy.
pub fn select_batch_with<M: ParametricModel + ?Sized>(
    ctx: &TwoStageContext,
    survivors: &UnweightedDesign,
    max_batch: usize,
    model: &M,
    noise: &NoiseModel,
    force: Option<SubsetSearch>,
) -> Result<(UnweightedDesign, SubsetSearch)> {
    if max_batch == 0 {
        return Err(Error::Config("maximal batch size must be at least 1".into()));
    }
    if survivors.is_empty() {
        return Err(Error::Infeasible("no survivors to choose from".into()));
    }
    let n = survivors.len();
    if n <= max_batch && force.is_none() {
        return Ok((survivors.clone(), SubsetSearch::Identity));
    }
    let k = max_batch.min(n);
    let roots = survivors
        .points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            model
                .jacobian(x.coords(), &ctx.theta_ref)
                .map(|j| info_root(&j, noise))
                .map_err(|e| Error::at(i, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let scorer = Scorer { ctx, roots };
    let strategy = force.unwrap_or(if binomial(n, k) <= EXHAUSTIVE_LIMIT {
        SubsetSearch::Exhaustive
    } else {
        SubsetSearch::Greedy
    });
    let (mut chosen, value) = match strategy {
        SubsetSearch::Greedy => greedy(&scorer, &survivors.points, k),
        _ => exhaustive(&scorer, &survivors.points, k),
    };
    if !value.is_finite() {
        return Err(Error::Infeasible(format!(
            "every {k}-subset of the {n} survivors leaves the combined information matrix singular"
        )));
    }
    chosen.sort_unstable();
    Ok((
        UnweightedDesign::new(chosen.into_iter().map(|i| survivors.points[i].clone()).collect()),
        strategy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64) -> InputPoint {
        InputPoint::new(vec![x])
    }

    fn xi(ws: &[f64]) -> WeightedDesign {
        WeightedDesign::new(ws.iter().enumerate().map(|(i, &w)| (w, pt(i as f64))).collect()).unwrap()
    }

    #[test]
    fn sieve_keeps_threshold() {
        let out = sieve(&xi(&[0.5, 0.3, 0.15, 0.04, 0.01]), 0.95);
        assert_eq!(out.points, vec![pt(0.0), pt(1.0), pt(2.0)]);
    }

    #[test]
    fn sieve_single_and_uniform() {
        assert_eq!(sieve(&xi(&[1.0]), 0.95).len(), 1);
        assert_eq!(sieve(&xi(&[0.25; 4]), 0.95).len(), 4);
    }

    #[test]
    fn combinations() {
        assert_eq!(binomial(5, 3), 10);
        assert_eq!(binomial(100, 3), 161_700);
        let mut c = vec![0, 1, 2];
        let mut count = 1;
        while next_combination(&mut c, 5) {
            count += 1;
        }
        assert_eq!(count, 10);
    }
}
