//! Randomized-response continual release of answer-histogram changes.
//!
//! Each entry holds one answer out of `z` labels (or none). Per interval the
//! entry's net change `(prev, next)` is encoded as one of `(z + 1)^2` cells,
//! randomized through a column-stochastic matrix, and the population's
//! responses are inverted into an unbiased estimate of the histogram change.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::{HdcrParams, ReleaseSchedule};
use crate::changelog::{Changelog, EntryId, Mutation, TimeRangeFilter, Timestamp};
use crate::engines::{decompose, node_stream};
use crate::mechanisms::{stream_id, NoiseStream, RR_DCR_TAG, RR_HDCR_TAG};
use crate::{Error, Result};

/// Condition number above which a response matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Ordered set of `z >= 2` distinct answer labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSpace {
    labels: Vec<String>,
}

impl ResponseSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidParameter("response space needs at least 2 labels".into()));
        }
        let mut seen = labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != labels.len() {
            return Err(Error::InvalidParameter("response labels must be distinct".into()));
        }
        Ok(ResponseSpace { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_owned()))
    }

    pub fn mutations(&self) -> AnswerMutationSpace {
        AnswerMutationSpace { answers: self.len() }
    }
}

/// Square column-stochastic matrix: entry `(i, j)` is the probability of
/// responding `i` when the truth is `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix {
    p: DMatrix<f64>,
    cdf: Vec<Vec<f64>>,
}

impl ProbabilityMatrix {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() || p.nrows() < 2 {
            return Err(Error::InvalidParameter("probability matrix must be square, size >= 2".into()));
        }
        if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidParameter("probabilities must be finite and >= 0".into()));
        }
        for (j, col) in p.column_iter().enumerate() {
            let s: f64 = col.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!("column {j} sums to {s}")));
            }
        }
        let cdf = p
            .column_iter()
            .map(|col| {
                col.iter()
                    .scan(0.0, |acc, x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        Ok(ProbabilityMatrix { p, cdf })
    }

    pub fn size(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[(i, j)]
    }

    /// Inverse by partial-pivot LU, refused when the 1-norm condition
    /// number exceeds [`MAX_CONDITION`].
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let inv = self
            .p
            .clone()
            .lu()
            .try_inverse()
            .ok_or(Error::SingularMatrix { condition: f64::INFINITY })?;
        let condition = one_norm(&self.p) * one_norm(&inv);
        if condition.is_nan() || condition > MAX_CONDITION {
            return Err(Error::SingularMatrix { condition });
        }
        Ok(inv)
    }

    /// Randomized response for true index `truth`.
    pub fn sample(&self, truth: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let cdf = &self.cdf[truth];
        cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1)
    }
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn optimal_entries(n: usize, epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    if n < 2 {
        return Err(Error::InvalidParameter(format!("response rule needs n >= 2, got {n}")));
    }
    let others = (n - 1) as f64;
    let e = epsilon.exp();
    Ok((e / (others + e), 1.0 / (others + e)))
}

/// The ε-optimal rule: keep the truth with probability `e^ε / (n - 1 + e^ε)`,
/// otherwise answer any other index with probability `1 / (n - 1 + e^ε)`.
pub fn optimal_rule(n: usize, epsilon: f64) -> Result<ProbabilityMatrix> {
    let (d, o) = optimal_entries(n, epsilon)?;
    ProbabilityMatrix::new(DMatrix::from_fn(n, n, |i, j| if i == j { d } else { o }))
}

/// Closed-form inverse of [`optimal_rule`]: `(I - o J) / (d - o)`.
pub fn optimal_rule_inverse(n: usize, epsilon: f64) -> Result<DMatrix<f64>> {
    let (d, o) = optimal_entries(n, epsilon)?;
    let g = d - o;
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { (1.0 - o) / g } else { -o / g }))
}

/// Whether every pair of columns keeps every response probability within a
/// factor `e^ε` (up to a relative 1e-12 for rounding).
pub fn verify_dp(p: &ProbabilityMatrix, epsilon: f64) -> bool {
    let bound = epsilon.exp() * (1.0 + 1e-12);
    let n = p.size();
    (0..n).all(|i| (0..n).all(|a| (0..n).all(|b| p.get(i, a) <= bound * p.get(i, b))))
}

/// Cells `(prev, next)` over answers plus null, row-major with null first:
/// cell `(prev, next)` has index `code(prev) * (z + 1) + code(next)` where
/// `code(None) = 0` and `code(Some(a)) = a + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerMutationSpace {
    answers: usize,
}

impl AnswerMutationSpace {
    pub fn new(answers: usize) -> Self {
        AnswerMutationSpace { answers }
    }

    pub fn answers(&self) -> usize {
        self.answers
    }

    pub fn len(&self) -> usize {
        (self.answers + 1) * (self.answers + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, prev: Option<usize>, next: Option<usize>) -> usize {
        let code = |x: Option<usize>| x.map_or(0, |a| a + 1);
        code(prev) * (self.answers + 1) + code(next)
    }

    pub fn pair(&self, index: usize) -> (Option<usize>, Option<usize>) {
        let decode = |c: usize| c.checked_sub(1);
        (decode(index / (self.answers + 1)), decode(index % (self.answers + 1)))
    }

    /// The no-change cell `(null, null)`.
    pub fn no_change(&self) -> usize {
        0
    }
}

/// Cell index of the mutation `prev -> next` given as labels.
pub fn encode_mutation(prev: Option<&str>, next: Option<&str>, space: &ResponseSpace) -> Result<usize> {
    let prev = prev.map(|l| space.index_of(l)).transpose()?;
    let next = next.map(|l| space.index_of(l)).transpose()?;
    Ok(space.mutations().index(prev, next))
}

pub fn one_hot(index: usize, space: &AnswerMutationSpace) -> DVector<f64> {
    let mut v = DVector::zeros(space.len());
    v[index] = 1.0;
    v
}

/// `z x (z+1)^2` matrix mapping a cell to its histogram change: `-1` at the
/// previous answer, `+1` at the next one, zero for unchanged cells.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaVMatrix(DMatrix<f64>);

impl DeltaVMatrix {
    pub fn new(space: &AnswerMutationSpace) -> Self {
        let z = space.answers();
        let mut m = DMatrix::zeros(z, space.len());
        for j in 0..space.len() {
            match space.pair(j) {
                (Some(a), Some(b)) if a == b => {}
                (prev, next) => {
                    if let Some(a) = prev {
                        m[(a, j)] -= 1.0;
                    }
                    if let Some(b) = next {
                        m[(b, j)] += 1.0;
                    }
                }
            }
        }
        DeltaVMatrix(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.0.column(j).iter().copied().collect()
    }
}

/// Histogram (change) estimate with its covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramEstimate {
    pub values: DVector<f64>,
    /// `(1/n) M P^-1 (diag(O) - O O^T) P^-T M^T` with `O` the mean response
    /// vector: the covariance of the per-respondent mean.
    pub covariance: DMatrix<f64>,
    /// Multinomial plug-in covariance of `values` themselves; equals
    /// `n^2 * covariance`.
    pub count_covariance: DMatrix<f64>,
    pub respondents: u64,
}

impl HistogramEstimate {
    fn zero(z: usize) -> Self {
        HistogramEstimate {
            values: DVector::zeros(z),
            covariance: DMatrix::zeros(z, z),
            count_covariance: DMatrix::zeros(z, z),
            respondents: 0,
        }
    }

    /// Sum of independent estimates.
    pub fn accumulate(&mut self, other: &HistogramEstimate) {
        self.values += &other.values;
        self.covariance += &other.covariance;
        self.count_covariance += &other.count_covariance;
        self.respondents += other.respondents;
    }

    /// Per-answer variance of `values`.
    pub fn variances(&self) -> Vec<f64> {
        self.count_covariance.diagonal().iter().copied().collect()
    }
}

/// Precomputed `M P^-1` for repeated estimation.
#[derive(Clone, Debug)]
pub struct Estimator {
    weights: DMatrix<f64>,
}

impl Estimator {
    pub fn new(p: &ProbabilityMatrix, m: &DeltaVMatrix) -> Result<Self> {
        if m.0.ncols() != p.size() {
            return Err(Error::InvalidParameter(format!(
                "response matrix size {} does not match {} mutation cells",
                p.size(),
                m.0.ncols()
            )));
        }
        Ok(Estimator {
            weights: &m.0 * p.inverse()?,
        })
    }

    /// Estimated change only.
    pub fn delta(&self, counts: &[u64]) -> DVector<f64> {
        let c = DVector::from_iterator(counts.len(), counts.iter().map(|&x| x as f64));
        &self.weights * c
    }

    pub fn estimate(&self, counts: &[u64]) -> HistogramEstimate {
        let z = self.weights.nrows();
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return HistogramEstimate::zero(z);
        }
        let nf = n as f64;
        let mean = DVector::from_iterator(counts.len(), counts.iter().map(|&x| x as f64 / nf));
        let spread = DMatrix::from_diagonal(&mean) - &mean * mean.transpose();
        let inner = &self.weights * spread * self.weights.transpose();
        let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        HistogramEstimate {
            values: self.delta(counts),
            covariance: sym(&inner / nf),
            count_covariance: sym(inner * nf),
            respondents: n,
        }
    }
}

fn histogram(responses: &[usize], cells: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; cells];
    for &r in responses {
        *counts
            .get_mut(r)
            .ok_or_else(|| Error::InvalidParameter(format!("response {r} outside {cells} cells")))? += 1;
    }
    Ok(counts)
}

/// `M P^-1` applied to the histogram of sampled responses.
pub fn estimate_delta_v(responses: &[usize], p: &ProbabilityMatrix, m: &DeltaVMatrix) -> Result<HistogramEstimate> {
    let est = Estimator::new(p, m)?;
    Ok(est.estimate(&histogram(responses, p.size())?))
}

#[derive(Debug, Serialize, Deserialize)]
struct AnswerRecord {
    entry: EntryId,
    t: i64,
    answer: Option<String>,
}

/// Per-entry answer timelines: at each recorded time the entry's answer
/// becomes the given label, or none.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerLog {
    space: ResponseSpace,
    timelines: BTreeMap<EntryId, Vec<(Timestamp, Option<usize>)>>,
}

impl AnswerLog {
    pub fn new(space: ResponseSpace) -> Self {
        AnswerLog {
            space,
            timelines: BTreeMap::new(),
        }
    }

    pub fn space(&self) -> &ResponseSpace {
        &self.space
    }

    pub fn entries(&self) -> usize {
        self.timelines.len()
    }

    pub fn timelines(&self) -> &BTreeMap<EntryId, Vec<(Timestamp, Option<usize>)>> {
        &self.timelines
    }

    /// Records that `entry` answers `answer` from time `t`. Times per entry
    /// must be strictly increasing.
    pub fn push(&mut self, entry: impl Into<EntryId>, t: impl Into<Timestamp>, answer: Option<&str>) -> Result<()> {
        let entry = entry.into();
        let t = t.into();
        let answer = answer.map(|a| self.space.index_of(a)).transpose()?;
        let line = self.timelines.entry(entry.clone()).or_default();
        if line.last().is_some_and(|(last, _)| *last >= t) {
            return Err(Error::InvalidMutation(format!("answers of {entry} not strictly increasing at t={t}")));
        }
        line.push((t, answer));
        Ok(())
    }

    pub fn read_jsonl(reader: impl BufRead, space: ResponseSpace) -> Result<Self> {
        let mut log = AnswerLog::new(space);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnswerRecord =
                serde_json::from_str(&line).map_err(|source| Error::Parse { line: i + 1, source })?;
            log.push(rec.entry, rec.t, rec.answer.as_deref())?;
        }
        Ok(log)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for (entry, line) in &self.timelines {
            for (t, a) in line {
                let rec = AnswerRecord {
                    entry: entry.clone(),
                    t: t.0,
                    answer: a.map(|i| self.space.labels[i].clone()),
                };
                serde_json::to_writer(&mut writer, &rec).map_err(|e| Error::Io(e.into()))?;
                writer.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Answer of a timeline at time `t` (the last record not after `t`).
    fn answer_at(line: &[(Timestamp, Option<usize>)], t: Timestamp) -> Option<usize> {
        let k = line.partition_point(|(s, _)| *s <= t);
        k.checked_sub(1).and_then(|k| line[k].1)
    }

    /// Net mutation cell of every entry over `filter`, in entry order;
    /// unchanged answers map to the no-change cell.
    pub fn cells(&self, filter: &TimeRangeFilter) -> Vec<usize> {
        let space = self.space.mutations();
        self.timelines
            .values()
            .map(|line| {
                let prev = filter.start().and_then(|s| Self::answer_at(line, s));
                let next = Self::answer_at(line, filter.end());
                if prev == next {
                    space.no_change()
                } else {
                    space.index(prev, next)
                }
            })
            .collect()
    }

    /// True histogram change over `filter`.
    pub fn delta_v(&self, filter: &TimeRangeFilter) -> DVector<f64> {
        let m = DeltaVMatrix::new(&self.space.mutations());
        let counts = histogram(&self.cells(filter), m.0.ncols()).expect("cells in range");
        &m.0 * DVector::from_iterator(counts.len(), counts.iter().map(|&x| x as f64))
    }

    /// Histogram of answers at time `t`.
    pub fn histogram_at(&self, t: Timestamp) -> Vec<u64> {
        let mut h = vec![0; self.space.len()];
        for line in self.timelines.values() {
            if let Some(a) = Self::answer_at(line, t) {
                h[a] += 1;
            }
        }
        h
    }

    /// The timelines as a changelog whose values are answer indices, for
    /// constraint checks. Records that repeat the current answer are skipped.
    pub fn to_changelog(&self) -> Result<Changelog> {
        let mut muts = Vec::new();
        for (entry, line) in &self.timelines {
            let mut cur = None;
            for &(t, a) in line {
                if a != cur {
                    muts.push(Mutation::new(entry.clone(), t, cur.map(|x| x as f64), a.map(|x| x as f64))?);
                    cur = a;
                }
            }
        }
        Changelog::from_unsorted(muts)
    }
}

/// Samples one response per entry cell from `stream`.
pub fn randomize(cells: &[usize], p: &ProbabilityMatrix, stream: &mut NoiseStream) -> Vec<u64> {
    let mut counts = vec![0u64; p.size()];
    for &c in cells {
        counts[p.sample(c, stream.rng())] += 1;
    }
    counts
}

/// Local estimates at each release time.
#[derive(Clone, Debug, PartialEq)]
pub struct RrPoint {
    pub t: Timestamp,
    pub estimate: HistogramEstimate,
    /// Independent estimates summed into this point.
    pub node_count: usize,
}

fn rule_for(space: &ResponseSpace, epsilon: f64) -> Result<(ProbabilityMatrix, Estimator)> {
    let cells = space.mutations();
    let p = optimal_rule(cells.len(), epsilon)?;
    let est = Estimator::new(&p, &DeltaVMatrix::new(&cells))?;
    Ok((p, est))
}

/// Disjoint release: one randomized response per entry and interval.
/// Returns the per-interval changes and their running sums.
pub fn rr_dcr(
    log: &AnswerLog,
    schedule: &ReleaseSchedule,
    epsilon: f64,
    seed: u64,
) -> Result<(Vec<RrPoint>, Vec<RrPoint>)> {
    let (p, est) = rule_for(&log.space, epsilon)?;
    let z = log.space.len();
    let mut deltas = Vec::with_capacity(schedule.len());
    let mut cumulative = Vec::with_capacity(schedule.len());
    let mut running = HistogramEstimate::zero(z);
    for (i, f) in schedule.filters().iter().enumerate() {
        let mut stream = NoiseStream::new(seed, stream_id(RR_DCR_TAG, i as u64));
        let estimate = est.estimate(&randomize(&log.cells(f), &p, &mut stream));
        running.accumulate(&estimate);
        deltas.push(RrPoint {
            t: f.end(),
            estimate,
            node_count: 1,
        });
        cumulative.push(RrPoint {
            t: f.end(),
            estimate: running.clone(),
            node_count: i + 1,
        });
    }
    Ok((deltas, cumulative))
}

/// Hierarchical release: every node answers its own interval; the running
/// histogram change at each bottom-layer boundary `t` is the sum over the
/// c-ary decomposition of `(start, t]`.
pub fn rr_hdcr(log: &AnswerLog, params: &HdcrParams, epsilon_per_node: f64, seed: u64) -> Result<Vec<RrPoint>> {
    params.validate()?;
    let (p, est) = rule_for(&log.space, epsilon_per_node)?;
    let nodes: Vec<Vec<HistogramEstimate>> = (0..params.height)
        .map(|layer| {
            (0..params.layer_len(layer) as u64)
                .map(|index| {
                    let f = params.node_filter(layer, index);
                    let mut stream = NoiseStream::new(seed, stream_id(RR_HDCR_TAG, node_stream(layer, index)));
                    est.estimate(&randomize(&log.cells(&f), &p, &mut stream))
                })
                .collect()
        })
        .collect();
    let z = log.space.len();
    Ok((1..=params.bottom_len())
        .map(|r| {
            let cover = decompose(r, params.branching, params.height);
            let mut sum = HistogramEstimate::zero(z);
            for id in &cover.nodes {
                sum.accumulate(&nodes[id.layer as usize][id.index as usize]);
            }
            RrPoint {
                t: params.range_filter(0, r).expect("r >= 1").end(),
                estimate: sum,
                node_count: cover.len(),
            }
        })
        .collect())
}

/// CSV with columns `t, v_<label>..., var_<label>...`.
pub fn write_rr_csv(points: &[RrPoint], space: &ResponseSpace, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_owned()];
    header.extend(space.labels().iter().map(|l| format!("v_{l}")));
    header.extend(space.labels().iter().map(|l| format!("var_{l}")));
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for p in points {
        let mut row = vec![p.t.0.to_string()];
        row.extend(p.estimate.values.iter().map(|v| v.to_string()));
        row.extend(p.estimate.variances().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
