use std::fs;
use std::path::{Path, PathBuf};

use dpcr::accountant::{CompositionStrategy, HdcrParams, ReleaseSchedule, SwcrParams};
use dpcr::changelog::MutationConstraint;
use dpcr::mechanisms::LinearQuerySpec;
use dpcr::rr::ResponseSpace;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Drives both the generator and the release noise. Mandatory.
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub release: ReleaseConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_entries: usize,
    pub horizon: i64,
    /// Declared mutation constraint; the generator and the accountant share it.
    pub constraint: Option<MutationConstraint>,
    pub value_range: [f64; 2],
    /// Probability that an entry mutates again after each change.
    pub mutation_rate: f64,
    /// Answer labels; when set the generator emits answer timelines.
    pub answers: Option<Vec<String>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_entries: 100,
            horizon: 100,
            constraint: None,
            value_range: [0.0, 10.0],
            mutation_rate: 0.5,
            answers: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReleaseKind {
    #[default]
    Dcr,
    Swcr,
    Hdcr,
    RrDcr,
    RrHdcr,
}

impl ReleaseKind {
    pub fn is_rr(self) -> bool {
        matches!(self, ReleaseKind::RrDcr | ReleaseKind::RrHdcr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReleaseConfig {
    pub kind: ReleaseKind,
    /// Per query (or node, or response) budget.
    pub epsilon: f64,
    pub delta: f64,
    pub composition: CompositionStrategy,
    /// Account per entry (local DP) instead of per database.
    pub local: bool,
    pub query: LinearQuerySpec,
    /// First endpoint of a disjoint or sliding-window schedule.
    pub first: i64,
    /// Disjoint interval, or bottom-layer interval of a hierarchy.
    pub interval: i64,
    pub count: usize,
    pub period: i64,
    pub window: i64,
    pub height: u32,
    pub branching: u64,
    pub start: i64,
    pub horizon: i64,
}

impl Default for ReleaseConfig {
    fn default() -> Self {
        ReleaseConfig {
            kind: ReleaseKind::Dcr,
            epsilon: 1.0,
            delta: 0.0,
            composition: CompositionStrategy::Naive,
            local: false,
            query: LinearQuerySpec::counting(),
            first: 10,
            interval: 10,
            count: 10,
            period: 10,
            window: 10,
            height: 3,
            branching: 2,
            start: 0,
            horizon: 100,
        }
    }
}

impl ReleaseConfig {
    pub fn schedule(&self) -> Result<ReleaseSchedule, CliError> {
        ReleaseSchedule::uniform(self.first, self.interval, self.count).map_err(|e| field("release.interval", e))
    }

    pub fn swcr(&self) -> Result<SwcrParams, CliError> {
        SwcrParams::new(self.period, self.window, self.first, self.count).map_err(|e| field("release.window", e))
    }

    pub fn hdcr(&self) -> Result<HdcrParams, CliError> {
        HdcrParams::new(self.height, self.branching, self.start, self.horizon, self.interval)
            .map_err(|e| field("release.height", e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub format: Format,
    pub path: Option<PathBuf>,
    pub include_exact: bool,
}

pub fn field(path: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {e}"))
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| field(&path.display().to_string(), e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| field(&e.path().to_string(), e.inner()))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| field("seed", "a seed is required (config `seed` or --seed)"))
    }

    /// The declared constraint; results are never reported without one.
    pub fn constraint(&self) -> Result<&MutationConstraint, CliError> {
        let c = self
            .generator
            .constraint
            .as_ref()
            .ok_or_else(|| field("generator.constraint", "a mutation constraint must be declared"))?;
        c.validate().map_err(|e| field("generator.constraint", e))?;
        Ok(c)
    }

    pub fn answers(&self) -> Result<ResponseSpace, CliError> {
        let labels = self
            .generator
            .answers
            .clone()
            .ok_or_else(|| field("generator.answers", "answer labels are required here"))?;
        ResponseSpace::new(labels).map_err(|e| field("generator.answers", e))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.generator;
        if g.horizon < 1 {
            return Err(field("generator.horizon", "must be a positive integer"));
        }
        let [a, b] = g.value_range;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(field("generator.value_range", "must be finite with low <= high"));
        }
        if !(0.0..=1.0).contains(&g.mutation_rate) {
            return Err(field("generator.mutation_rate", "must lie in [0, 1]"));
        }
        let r = &self.release;
        if !(r.epsilon.is_finite() && r.epsilon > 0.0) {
            return Err(field("release.epsilon", "must be > 0"));
        }
        if !(0.0..1.0).contains(&r.delta) {
            return Err(field("release.delta", "must lie in [0, 1)"));
        }
        r.query.validate().map_err(|e| field("release.query", e))?;
        Ok(())
    }
}

/// Parses `k=3`, `b=7` or alternatives such as `k=2|b=5`.
pub fn parse_constraint(s: &str) -> Result<MutationConstraint, String> {
    let parts: Vec<&str> = s.split('|').map(str::trim).collect();
    let one = |p: &str| -> Result<MutationConstraint, String> {
        let (key, value) = p.split_once('=').ok_or_else(|| format!("expected k=<n> or b=<n>, got `{p}`"))?;
        match key.trim() {
            "k" => value
                .trim()
                .parse()
                .map(|k| MutationConstraint::AtMostK { k })
                .map_err(|e| format!("k: {e}")),
            "b" => value
                .trim()
                .parse()
                .map(|b| MutationConstraint::TimeBounded { b })
                .map_err(|e| format!("b: {e}")),
            other => Err(format!("unknown constraint `{other}`, expected k or b")),
        }
    };
    let c = if parts.len() == 1 {
        one(parts[0])?
    } else {
        MutationConstraint::Hybrid(parts.into_iter().map(one).collect::<Result<_, _>>()?)
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Parses `naive` or `advanced:<slack>`.
pub fn parse_composition(s: &str) -> Result<CompositionStrategy, String> {
    match s.split_once(':') {
        None if s == "naive" => Ok(CompositionStrategy::Naive),
        Some(("advanced", slack)) => slack
            .parse()
            .map(|delta_slack| CompositionStrategy::Advanced { delta_slack })
            .map_err(|e| format!("slack: {e}")),
        _ => Err(format!("expected naive or advanced:<slack>, got `{s}`")),
    }
}
