//! Linear-query changes over mutation batches and Laplace perturbation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::changelog::Mutation;
use crate::{Error, Result};

/// Predicate for counting queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Any,
    Gt(f64),
    Ge(f64),
    Lt(f64),
    Le(f64),
    Eq(f64),
    Between { lo: f64, hi: f64 },
}

impl Predicate {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Predicate::Any => true,
            Predicate::Gt(x) => v > x,
            Predicate::Ge(x) => v >= x,
            Predicate::Lt(x) => v < x,
            Predicate::Le(x) => v <= x,
            Predicate::Eq(x) => v == x,
            Predicate::Between { lo, hi } => lo <= v && v <= hi,
        }
    }
}

/// Per-value function of a linear query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryFn {
    /// Sum of values.
    Identity,
    /// Conditional count.
    Indicator(Predicate),
    /// Sum of squares.
    SecondMoment,
    /// Exact-match lookup with a fallback.
    Table { entries: Vec<(f64, f64)>, default: f64 },
}

impl QueryFn {
    fn apply(&self, v: f64) -> f64 {
        match self {
            QueryFn::Identity => v,
            QueryFn::Indicator(p) => {
                if p.holds(v) {
                    1.0
                } else {
                    0.0
                }
            }
            QueryFn::SecondMoment => v * v,
            QueryFn::Table { entries, default } => entries
                .iter()
                .find(|(k, _)| *k == v)
                .map_or(*default, |(_, out)| *out),
        }
    }
}

/// A linear query `sum f(x)` whose per-value output is clamped into
/// `[lower, upper]`. The bounds must contain 0, the value of an absent entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearQuerySpec {
    function: QueryFn,
    lower: f64,
    upper: f64,
}

impl LinearQuerySpec {
    pub fn new(function: QueryFn, lower: f64, upper: f64) -> Result<Self> {
        let spec = LinearQuerySpec { function, lower, upper };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the bounds, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        let (lower, upper) = (self.lower, self.upper);
        if !(lower.is_finite() && upper.is_finite() && lower <= 0.0 && 0.0 <= upper) {
            return Err(Error::InvalidParameter(format!(
                "query bounds [{lower}, {upper}] must be finite and contain 0"
            )));
        }
        Ok(())
    }

    /// Counts live entries.
    pub fn counting() -> Self {
        LinearQuerySpec {
            function: QueryFn::Indicator(Predicate::Any),
            lower: 0.0,
            upper: 1.0,
        }
    }

    pub fn sum(lower: f64, upper: f64) -> Result<Self> {
        Self::new(QueryFn::Identity, lower, upper)
    }

    pub fn function(&self) -> &QueryFn {
        &self.function
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// `f(value)` clamped into the bounds; an absent value contributes 0.
    pub fn eval(&self, value: Option<f64>) -> f64 {
        value.map_or(0.0, |v| self.function.apply(v).clamp(self.lower, self.upper))
    }

    /// Sensitivity of one mutation's contribution: `upper - lower`.
    pub fn sensitivity(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Change of the linear query caused by `mutations`.
pub fn linear_query_change(mutations: &[Mutation], spec: &LinearQuerySpec) -> f64 {
    let mut change = 0.0;
    for m in mutations {
        change -= spec.eval(m.prev());
        change += spec.eval(m.new_value());
    }
    change
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Laplace,
}

/// Noise calibration plus the seed its random streams derive from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub epsilon: f64,
    pub sensitivity: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn laplace(epsilon: f64, sensitivity: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec {
            kind: NoiseKind::Laplace,
            epsilon,
            sensitivity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidNoise(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(Error::InvalidNoise(format!(
                "sensitivity must be > 0, got {}",
                self.sensitivity
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseSpec { seed, ..self }
    }

    /// Laplace scale `sensitivity / epsilon`.
    pub fn scale(&self) -> f64 {
        self.sensitivity / self.epsilon
    }

    /// Variance of one noise draw, `2 * scale^2`.
    pub fn variance(&self) -> f64 {
        2.0 * self.scale() * self.scale()
    }

    /// Independent stream for one query or node of a release.
    pub fn stream(&self, id: u64) -> NoiseStream {
        NoiseStream::new(self.seed, id)
    }
}

/// Identifies the stream of one query or node. Distinct releases use
/// distinct tags so that their streams never coincide.
pub fn stream_id(tag: u8, index: u64) -> u64 {
    debug_assert!(index < 1 << 56);
    (tag as u64) << 56 | index
}

pub(crate) const DCR_TAG: u8 = 1;
pub(crate) const SWCR_TAG: u8 = 2;
pub(crate) const HDCR_TAG: u8 = 3;
pub(crate) const RR_DCR_TAG: u8 = 4;
pub(crate) const RR_HDCR_TAG: u8 = 5;

/// Counter-based random stream: ChaCha8 keyed by the seed, one ChaCha
/// stream number per id.
#[derive(Clone, Debug)]
pub struct NoiseStream(ChaCha8Rng);

impl NoiseStream {
    pub fn new(seed: u64, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        NoiseStream(rng)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn open_unit(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Laplace(0, scale) by inverse CDF.
    pub fn laplace(&mut self, scale: f64) -> f64 {
        let u = self.open_unit() - 0.5;
        -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

/// `value` plus one Laplace draw from `stream`.
pub fn perturb(value: f64, noise: &NoiseSpec, stream: &mut NoiseStream) -> Result<f64> {
    noise.validate()?;
    match noise.kind {
        NoiseKind::Laplace => Ok(value + stream.laplace(noise.scale())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::changelog::Mutation;
    use crate::oracles::{monte_carlo, Statistic};

    #[test]
    fn value_change_example() {
        let spec = LinearQuerySpec::sum(0.0, 200.0).unwrap();
        let m = [Mutation::modify("x", 1, 50.0, 100.0).unwrap()];
        assert_eq!(linear_query_change(&m, &spec), 50.0);
        assert_eq!(linear_query_change(&[], &spec), 0.0);
    }

    #[test]
    fn full_lifecycle_nets_to_zero() {
        let spec = LinearQuerySpec::sum(0.0, 10.0).unwrap();
        let m = [
            Mutation::insert("x", 1, 3.0).unwrap(),
            Mutation::modify("x", 2, 3.0, 7.0).unwrap(),
            Mutation::delete("x", 3, 7.0).unwrap(),
        ];
        assert_eq!(linear_query_change(&m[..1], &spec), 3.0);
        assert_eq!(linear_query_change(&m[1..2], &spec), 4.0);
        assert_eq!(linear_query_change(&m[2..], &spec), -7.0);
        assert_eq!(linear_query_change(&m, &spec), 0.0);
    }

    #[test]
    fn clamping_keeps_changes_in_range() {
        let spec = LinearQuerySpec::new(QueryFn::SecondMoment, 0.0, 25.0).unwrap();
        assert_eq!(spec.eval(Some(3.0)), 9.0);
        assert_eq!(spec.eval(Some(-10.0)), 25.0);
        assert_eq!(spec.eval(None), 0.0);
        let m = [Mutation::modify("x", 1, 0.0, 1e6).unwrap()];
        assert_eq!(linear_query_change(&m, &spec), 25.0);
    }

    #[test]
    fn sensitivities() {
        assert_eq!(LinearQuerySpec::counting().sensitivity(), 1.0);
        assert_eq!(LinearQuerySpec::sum(0.0, 0.0).unwrap().sensitivity(), 0.0);
        assert_eq!(LinearQuerySpec::sum(-5.0, 3.0).unwrap().sensitivity(), 8.0);
        assert!(LinearQuerySpec::sum(1.0, 3.0).is_err());
        assert!(LinearQuerySpec::sum(2.0, -3.0).is_err());
    }

    #[test]
    fn indicator_and_table() {
        let count_big = LinearQuerySpec::new(QueryFn::Indicator(Predicate::Gt(10.0)), 0.0, 1.0).unwrap();
        assert_eq!(count_big.eval(Some(11.0)), 1.0);
        assert_eq!(count_big.eval(Some(10.0)), 0.0);
        let table = LinearQuerySpec::new(
            QueryFn::Table {
                entries: vec![(1.0, 0.5), (2.0, 2.0)],
                default: 0.0,
            },
            0.0,
            1.0,
        )
        .unwrap();
        assert_eq!(table.eval(Some(1.0)), 0.5);
        assert_eq!(table.eval(Some(2.0)), 1.0);
        assert_eq!(table.eval(Some(3.0)), 0.0);
    }

    #[test]
    fn invalid_noise_rejected() {
        assert!(NoiseSpec::laplace(0.0, 1.0, 1).is_err());
        assert!(NoiseSpec::laplace(1.0, 0.0, 1).is_err());
        let bad = NoiseSpec {
            kind: NoiseKind::Laplace,
            epsilon: -1.0,
            sensitivity: 1.0,
            seed: 0,
        };
        assert!(matches!(
            perturb(0.0, &bad, &mut NoiseStream::new(0, 0)),
            Err(Error::InvalidNoise(_))
        ));
    }

    #[test]
    fn perturb_is_deterministic_per_stream() {
        let noise = NoiseSpec::laplace(0.5, 1.0, 42).unwrap();
        let a = perturb(3.0, &noise, &mut noise.stream(7)).unwrap();
        let b = perturb(3.0, &noise, &mut noise.stream(7)).unwrap();
        let c = perturb(3.0, &noise, &mut noise.stream(8)).unwrap();
        let d = perturb(3.0, &noise.with_seed(43), &mut noise.with_seed(43).stream(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn laplace_moments() {
        let noise = NoiseSpec::laplace(0.5, 2.0, 11).unwrap();
        let n = 100_000;
        let draw = |seed: u64| perturb(10.0, &noise, &mut noise.with_seed(seed).stream(0)).unwrap() - 10.0;
        let mean = monte_carlo(Statistic::Mean, n, 5, draw).unwrap();
        let sigma = noise.variance().sqrt();
        assert!(mean.value.abs() <= 3.0 * sigma / (n as f64).sqrt(), "{mean:?}");
        let var = monte_carlo(Statistic::Variance, n, 6, draw).unwrap();
        assert!((var.value / noise.variance() - 1.0).abs() < 0.05, "{var:?}");
    }
}
