//! Brute-force reference computations and the verification suite.
//!
//! The oracle functions re-derive their quantities along independent code
//! paths (no engine or accountant calls); [`run_suite`] pits them against
//! the library.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::accountant::{
    dcr_folds, hdcr_folds, local_bound, most_span, swcr_folds, CompositionStrategy, HdcrParams, PrivacyLoss,
    ReleaseSchedule, SwcrParams,
};
use crate::changelog::{Changelog, Mutation, MutationConstraint, TimeRangeFilter, Timestamp};
use crate::engines::{aggregate, build_hdcr, cover_range, run_dcr};
use crate::mechanisms::{LinearQuerySpec, NoiseSpec};
use crate::rr::{optimal_rule, randomize, verify_dp, DeltaVMatrix, Estimator};
use crate::{Error, Result};

/// One oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub instance: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Pass iff `|expected - actual| <= tolerance`.
    pub fn within(name: &str, instance: impl Into<String>, expected: f64, actual: f64, tolerance: f64) -> Self {
        OracleReport {
            name: name.to_owned(),
            instance: instance.into(),
            expected,
            actual,
            tolerance,
            pass: (expected - actual).abs() <= tolerance,
        }
    }

    pub fn exact(name: &str, instance: impl Into<String>, expected: f64, actual: f64) -> Self {
        Self::within(name, instance, expected, actual, 0.0)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} {:<44} expected={:<14.6} actual={:<14.6} tol={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.instance,
            self.expected,
            self.actual,
            self.tolerance
        )
    }
}

/// Replays the log up to `t` into a fresh map and sums `f` over live
/// entries (in entry order, so the result is reproducible).
pub fn snapshot_oracle(log: &Changelog, t: Timestamp, spec: &LinearQuerySpec) -> f64 {
    let mut live: HashMap<&str, f64> = HashMap::new();
    for m in log.iter().take_while(|m| m.time() <= t) {
        match m.new_value() {
            Some(v) => live.insert(m.entry().as_str(), v),
            None => live.remove(m.entry().as_str()),
        };
    }
    let mut entries: Vec<_> = live.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    entries.iter().map(|(_, v)| spec.eval(Some(*v))).sum()
}

/// The quadratic scan over schedule pairs, kept literally.
pub fn most_span_oracle(t_array: &[Timestamp], window: i64) -> u64 {
    let mut res = 0;
    for i in 0..t_array.len().saturating_sub(1) {
        for j in i + 1..t_array.len() {
            if t_array[j].0 - t_array[i].0 >= window {
                res = res.max(j - i + 1);
                break;
            }
        }
    }
    res as u64
}

/// Unit ranges of every node a hierarchy holds; nodes at the end of the
/// horizon are truncated to the last bottom unit.
pub fn node_universe(p: &HdcrParams) -> Vec<(u64, u64)> {
    let units = (p.horizon as u64).div_ceil(p.interval as u64);
    let mut out = Vec::new();
    let mut width = 1u64;
    for _ in 0..p.height {
        let mut lo = 0;
        while lo < units {
            out.push((lo, (lo + width).min(units)));
            lo += width;
        }
        width *= p.branching;
    }
    out
}

/// Minimum number of universe nodes that tile `(l, r]` exactly, by dynamic
/// programming over right endpoints. `None` when no tiling exists.
pub fn min_cover_oracle(l: u64, r: u64, universe: &[(u64, u64)]) -> Option<u64> {
    if l >= r {
        return None;
    }
    let span = (r - l) as usize;
    let mut best: Vec<Option<u64>> = vec![None; span + 1];
    best[0] = Some(0);
    for x in 1..=span {
        let end = l + x as u64;
        best[x] = universe
            .iter()
            .filter(|(a, b)| *b == end && *a >= l)
            .filter_map(|(a, _)| best[(a - l) as usize].map(|n| n + 1))
            .min();
    }
    best[span]
}

/// Number of filters accepting at least one of the entry's mutation times,
/// by exhaustive membership tests.
pub fn affected_count_oracle(filters: &[TimeRangeFilter], entry_muts: &[Mutation]) -> u64 {
    let mut count = 0;
    for f in filters {
        for m in entry_muts {
            if f.accepts(m.time()) {
                count += 1;
                break;
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Statistic {
    Mean,
    Variance,
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Seed of trial `trial` under master seed `seed`.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng.next_u64()
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < 100 {
        return Err(Error::InvalidParameter(format!("Monte Carlo needs >= 100 trials, got {trials}")));
    }
    Ok(())
}

/// Runs `sampler` once per trial with derived seeds, in parallel; the
/// samples are reduced in trial order so the result depends only on `seed`.
pub fn monte_carlo<F>(stat: Statistic, trials: usize, seed: u64, sampler: F) -> Result<Estimate>
where
    F: Fn(u64) -> f64 + Sync,
{
    check_trials(trials)?;
    let xs: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| sampler(trial_seed(seed, i)))
        .collect();
    let n = trials as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(match stat {
        Statistic::Mean => Estimate {
            value: mean,
            stderr: (m2 / n).sqrt(),
            trials,
        },
        Statistic::Variance => {
            let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            Estimate {
                value: m2 * n / (n - 1.0),
                stderr: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
                trials,
            }
        }
    })
}

/// Componentwise mean, its standard errors, and the sample covariance of a
/// vector-valued sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorEstimate {
    pub mean: DVector<f64>,
    pub stderr: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub trials: usize,
}

pub fn monte_carlo_vector<F>(trials: usize, seed: u64, sampler: F) -> Result<VectorEstimate>
where
    F: Fn(u64) -> DVector<f64> + Sync,
{
    check_trials(trials)?;
    let xs: Vec<DVector<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| sampler(trial_seed(seed, i)))
        .collect();
    let n = trials as f64;
    let dim = xs[0].len();
    let mean = xs.iter().fold(DVector::zeros(dim), |acc, x| acc + x) / n;
    let covariance = xs.iter().fold(DMatrix::zeros(dim, dim), |acc, x| {
        let d = x - &mean;
        acc + &d * d.transpose()
    }) / (n - 1.0);
    let stderr = covariance.diagonal().map(|v| (v / n).sqrt());
    Ok(VectorEstimate {
        mean,
        stderr,
        covariance,
        trials,
    })
}

/// Relative tolerance for a Monte Carlo variance: 10% at 10^4 trials,
/// shrinking with the square root of the trial count.
pub fn variance_tolerance(trials: usize) -> f64 {
    0.10 * (1e4 / trials as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    /// Test hook: shortens every cover by its last node before checking.
    pub inject_cover_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 10_000,
            seed: 2024,
            inject_cover_fault: false,
        }
    }
}

fn units(layer: u32, index: u64, c: u64) -> (u64, u64) {
    let w = c.pow(layer);
    (index * w, (index + 1) * w)
}

fn ceil_log(x: u64, c: u64) -> u64 {
    let (mut k, mut w) = (0, 1);
    while w < x {
        w *= c;
        k += 1;
    }
    k
}

/// Exhaustive cover checks over `0 <= l < r <= span`: violations of the
/// node-count bound or of exact tiling, and ranges where the cover is
/// minimal.
pub fn cover_audit(c: u64, h: u32, span: u64, fault: bool) -> Result<(u64, u64, u64)> {
    let universe = node_universe(&HdcrParams::new(h, c, 0, span as i64, 1)?);
    let (mut bad, mut minimal, mut total) = (0, 0, 0);
    for l in 0..span {
        for r in l + 1..=span.min(l + c.pow(h)) {
            let mut nodes = cover_range(l, r, c, h)?.nodes;
            if fault {
                nodes.pop();
            }
            let mut ranges: Vec<_> = nodes.iter().map(|n| units(n.layer, n.index, c)).collect();
            ranges.sort_unstable();
            let tiles = ranges.first().is_some_and(|f| f.0 == l)
                && ranges.last().is_some_and(|f| f.1 == r)
                && ranges.windows(2).all(|w| w[0].1 == w[1].0);
            let bound = if r - l == 1 { 1 } else { 2 * (c - 1) * ceil_log(r - l, c) };
            if !tiles || nodes.len() as u64 > bound {
                bad += 1;
            }
            if min_cover_oracle(l, r, &universe) == Some(nodes.len() as u64) {
                minimal += 1;
            }
            total += 1;
        }
    }
    Ok((bad, minimal, total))
}

/// Random changelog over `entries` entries in `[0, horizon)` with values in
/// `[0, 10)`.
pub fn random_changelog(rng: &mut impl Rng, entries: usize, horizon: i64, max_mutations: usize) -> Changelog {
    let mut muts = Vec::new();
    for e in 0..entries {
        let id = format!("e{e:04}");
        let n = rng.gen_range(1..=max_mutations);
        let mut times: Vec<i64> = (0..n).map(|_| rng.gen_range(0..horizon)).collect();
        times.sort_unstable();
        times.dedup();
        let mut cur: Option<f64> = None;
        for (i, t) in times.iter().enumerate() {
            let next = if i > 0 && rng.gen_bool(0.2) {
                None
            } else {
                Some(rng.gen_range(0..10) as f64)
            };
            if cur.is_none() && next.is_none() {
                continue;
            }
            if let Ok(m) = Mutation::new(id.as_str(), *t, cur, next) {
                muts.push(m);
                cur = next;
            }
        }
    }
    Changelog::from_unsorted(muts).expect("generated chains are consistent")
}

/// The whole oracle suite, as run by the `verify` command.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let fault = opts.inject_cover_fault;

    for (c, h, span) in [(2u64, 6u32, 64u64), (10, 2, 100)] {
        let (bad, minimal, total) = cover_audit(c, h, span, fault)?;
        let instance = format!("c={c} h={h} 0<=l<r<={span}");
        out.push(OracleReport::exact("cover violations", instance.clone(), 0.0, bad as f64));
        if c == 2 {
            let frac = minimal as f64 / total as f64;
            out.push(OracleReport {
                pass: frac >= 0.9,
                ..OracleReport::within("cover minimal fraction", instance, 1.0, frac, 0.1)
            });
        }
    }
    let mut worked_cover = cover_range(0, 99, 10, 2)?.nodes;
    if fault {
        worked_cover.pop();
    }
    out.push(OracleReport::exact("cover node count", "(0,99] c=10 h=2", 18.0, worked_cover.len() as f64));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.gen_range(2..20);
        let mut t: Vec<i64> = (0..n).map(|_| rng.gen_range(0..60)).collect();
        t.sort_unstable();
        t.dedup();
        let Ok(s) = ReleaseSchedule::new(t.into_iter().map(Timestamp).collect()) else {
            continue;
        };
        let w = rng.gen_range(0..40);
        if most_span(&s, w) != most_span_oracle(s.endpoints(), w) {
            mismatches += 1;
        }
    }
    out.push(OracleReport::exact("span scan", "500 random schedules", 0.0, mismatches as f64));

    let mut over = 0;
    for _ in 0..2000 {
        let w = rng.gen_range(1..6);
        let s = ReleaseSchedule::uniform(rng.gen_range(0..5), w, rng.gen_range(1..30))?;
        let k = rng.gen_range(1..5u64);
        let b = rng.gen_range(0..12);
        let entry = random_entry(&mut rng, k as usize, b, 160);
        for c in [MutationConstraint::AtMostK { k }, MutationConstraint::TimeBounded { b }] {
            if affected_count_oracle(&s.filters(), &entry) > dcr_folds(&s, &c) {
                over += 1;
            }
        }
        let p = SwcrParams::new(rng.gen_range(1..6), rng.gen_range(1..15), rng.gen_range(0..5), rng.gen_range(1..30))?;
        for c in [MutationConstraint::AtMostK { k }, MutationConstraint::TimeBounded { b }] {
            if affected_count_oracle(&p.filters(), &entry) > swcr_folds(&p, &c) {
                over += 1;
            }
        }
    }
    out.push(OracleReport::exact("fold dominance", "2000 random entries", 0.0, over as f64));

    let spec = LinearQuerySpec::sum(0.0, 10.0)?;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let log = random_changelog(&mut rng, 30, 100, 4);
        let s = ReleaseSchedule::uniform(9, 10, 10)?;
        let release = run_dcr(&log, &s, &spec, &NoiseSpec::laplace(1.0, 10.0, i)?)?;
        let mut running = 0.0;
        for (rec, t) in release.records.iter().zip(s.endpoints()) {
            running += rec.exact.unwrap_or(f64::NAN);
            worst = worst.max((running - snapshot_oracle(&log, *t, &spec)).abs());
        }
    }
    out.push(OracleReport::within("snapshot additivity", "100 random logs", 0.0, worst, 1e-9));

    for n in [2usize, 9, 26] {
        for eps in [0.5, 1.0, 2.0] {
            let p = optimal_rule(n, eps)?;
            let ok = verify_dp(&p, eps) && !verify_dp(&p, 0.99 * eps);
            out.push(OracleReport::exact("rr ratio", format!("n={n} eps={eps}"), 1.0, ok as u8 as f64));
        }
    }

    let strategy = CompositionStrategy::Naive;
    let eps = PrivacyLoss::pure(0.1)?;
    let mut doubling = 0;
    for k in 1..=5 {
        let c = MutationConstraint::AtMostK { k };
        let p = HdcrParams::new(3, 2, 0, 64, 1)?;
        let folds = hdcr_folds(&p, &c);
        let local = local_bound(folds, eps, &strategy)?;
        if (local.epsilon() - 0.1 * (2 * folds) as f64).abs() > 1e-12 {
            doubling += 1;
        }
    }
    out.push(OracleReport::exact("local doubling", "hdcr k=1..5", 0.0, doubling as f64));

    let trials = opts.trials;
    let var_tol = variance_tolerance(trials);
    let laplace = NoiseSpec::laplace(0.5, 1.0, 0)?;
    let draw = |s: u64| laplace.with_seed(s).stream(0).laplace(laplace.scale());
    let v = monte_carlo(Statistic::Variance, trials, opts.seed, draw)?;
    out.push(OracleReport::within(
        "laplace variance",
        format!("b=2, {trials} trials"),
        1.0,
        v.value / laplace.variance(),
        var_tol,
    ));
    let m = monte_carlo(Statistic::Mean, trials, opts.seed + 1, draw)?;
    out.push(OracleReport::within("laplace mean", format!("b=2, {trials} trials"), 0.0, m.value, 3.0 * m.stderr));

    let log = random_changelog(&mut rng, 40, 64, 3);
    let hp = HdcrParams::new(4, 2, 0, 64, 4)?;
    let node_noise = NoiseSpec::laplace(0.5, 10.0, 0)?;
    let (l, r) = (3, 14);
    let reference = aggregate(&build_hdcr(&log, &hp, &spec, &node_noise)?, l, r)?;
    let sample = |s: u64| {
        let tree = build_hdcr(&log, &hp, &spec, &node_noise.with_seed(s)).expect("valid tree");
        aggregate(&tree, l, r).expect("range inside span").noisy
    };
    let v = monte_carlo(Statistic::Variance, trials, opts.seed + 2, sample)?;
    out.push(OracleReport::within(
        "aggregate variance",
        format!("({l},{r}] {} nodes", reference.node_count),
        1.0,
        v.value / reference.variance,
        var_tol,
    ));
    let m = monte_carlo(Statistic::Mean, trials, opts.seed + 3, sample)?;
    out.push(OracleReport::within(
        "aggregate mean",
        format!("({l},{r}] {} nodes", reference.node_count),
        reference.exact,
        m.value,
        3.0 * m.stderr,
    ));

    let cells = crate::rr::AnswerMutationSpace::new(2);
    let p = optimal_rule(cells.len(), 1.0)?;
    let est = Estimator::new(&p, &DeltaVMatrix::new(&cells))?;
    let truth = [cells.index(Some(0), Some(1))];
    let vm = monte_carlo_vector(trials, opts.seed + 4, |s| {
        est.delta(&randomize(&truth, &p, &mut crate::mechanisms::NoiseStream::new(s, 0)))
    })?;
    for (i, expected) in [-1.0, 1.0].into_iter().enumerate() {
        out.push(OracleReport::within(
            "rr unbiased",
            format!("z=2 one change, component {i}"),
            expected,
            vm.mean[i],
            3.0 * vm.stderr[i],
        ));
    }

    Ok(out)
}

/// One entry's history with at most `k` mutations inside `[t0, t0 + b]`,
/// packed tightly to stress fold bounds.
fn random_entry(rng: &mut impl Rng, k: usize, b: i64, horizon: i64) -> Vec<Mutation> {
    let t0 = rng.gen_range(0..horizon);
    let mut times: Vec<i64> = (0..k).map(|_| t0 + rng.gen_range(0..=b)).collect();
    times[0] = t0;
    times.sort_unstable();
    times.dedup();
    let mut out = vec![Mutation::insert("x", times[0], 0.0).expect("finite")];
    for (i, t) in times.iter().enumerate().skip(1) {
        out.push(Mutation::modify("x", *t, (i - 1) as f64, i as f64).expect("finite"));
    }
    out
}
