//! Disjoint, sliding-window and hierarchical release engines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accountant::{div_ceil, HdcrParams, ReleaseSchedule, SwcrParams};
use crate::changelog::{Changelog, MutationConstraint, TimeRangeFilter};
use crate::mechanisms::{
    linear_query_change, perturb, stream_id, LinearQuerySpec, NoiseSpec, DCR_TAG, HDCR_TAG, SWCR_TAG,
};
use crate::{Error, Result};

/// One released query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub index: usize,
    pub filter: TimeRangeFilter,
    pub noisy: f64,
    /// Un-noised answer; kept for verification, stripped by [`ReleaseResult::redacted`].
    pub exact: Option<f64>,
    /// Nodes summed to answer this query (aggregated releases only).
    pub node_count: Option<usize>,
    /// Variance of the noise in `noisy`.
    pub variance: f64,
}

/// Records of a release, one per scheduled query in schedule order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReleaseResult {
    pub records: Vec<QueryRecord>,
}

#[derive(Serialize)]
struct JsonRow {
    query_index: usize,
    t_start: Option<i64>,
    t_end: i64,
    noisy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    node_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<f64>,
}

impl ReleaseResult {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn noisy(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.noisy).collect()
    }

    /// Exact values, if they were retained.
    pub fn exact(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.exact).collect()
    }

    /// Copy without any un-noised values.
    pub fn redacted(&self) -> ReleaseResult {
        ReleaseResult {
            records: self
                .records
                .iter()
                .map(|r| QueryRecord {
                    exact: None,
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// CSV with columns `query_index,t_start,t_end,noisy` plus `exact` when
    /// every record still carries one. An unbounded start is written empty.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let with_exact = !self.is_empty() && self.records.iter().all(|r| r.exact.is_some());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["query_index", "t_start", "t_end", "noisy"];
        if with_exact {
            header.push("exact");
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.index.to_string(),
                r.filter.start().map(|t| t.0.to_string()).unwrap_or_default(),
                r.filter.end().0.to_string(),
                r.noisy.to_string(),
            ];
            if with_exact {
                row.push(r.exact.unwrap_or_default().to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for r in &self.records {
            let row = JsonRow {
                query_index: r.index,
                t_start: r.filter.start().map(|t| t.0),
                t_end: r.filter.end().0,
                noisy: r.noisy,
                node_count: r.node_count,
                variance: r.node_count.map(|_| r.variance),
                exact: r.exact,
            };
            serde_json::to_writer(&mut writer, &row).map_err(|e| Error::Io(e.into()))?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

fn release_filters(
    log: &Changelog,
    filters: &[TimeRangeFilter],
    spec: &LinearQuerySpec,
    noise: &NoiseSpec,
    tag: u8,
) -> Result<ReleaseResult> {
    noise.validate()?;
    let records = filters
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let exact = linear_query_change(log.filter(f), spec);
            let noisy = perturb(exact, noise, &mut noise.stream(stream_id(tag, i as u64)))?;
            Ok(QueryRecord {
                index: i,
                filter: *f,
                noisy,
                exact: Some(exact),
                node_count: None,
                variance: noise.variance(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReleaseResult { records })
}

/// Disjoint continual release: one noisy change per schedule interval.
pub fn run_dcr(
    log: &Changelog,
    schedule: &ReleaseSchedule,
    spec: &LinearQuerySpec,
    noise: &NoiseSpec,
) -> Result<ReleaseResult> {
    release_filters(log, &schedule.filters(), spec, noise, DCR_TAG)
}

/// Sliding-window release computed directly, one independent query per window.
pub fn run_swcr(log: &Changelog, p: &SwcrParams, spec: &LinearQuerySpec, noise: &NoiseSpec) -> Result<ReleaseResult> {
    p.validate()?;
    release_filters(log, &p.filters(), spec, noise, SWCR_TAG)
}

/// Node `index` of layer `layer`, covering bottom units
/// `(index * c^layer, (index + 1) * c^layer]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: u32,
    pub index: u64,
}

impl NodeId {
    /// Bottom-unit range `(lo, hi]` of the node.
    pub fn units(&self, branching: u64) -> (u64, u64) {
        let w = branching.pow(self.layer);
        (self.index * w, (self.index + 1) * w)
    }
}

/// Disjoint nodes whose union is a target unit range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeCover {
    pub nodes: Vec<NodeId>,
}

impl RangeCover {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Greedy upward from `x` to `r`, nodes no larger than `c^max_layer`.
fn cover_up(mut x: u64, r: u64, c: u64, max_layer: u32, out: &mut Vec<NodeId>) {
    while x < r {
        let mut j = max_layer;
        loop {
            let w = c.pow(j);
            if x.is_multiple_of(w) && x + w <= r {
                out.push(NodeId { layer: j, index: x / w });
                x += w;
                break;
            }
            j -= 1;
        }
    }
}

/// Greedy downward from `x` to `l`, nodes no larger than `c^max_layer`.
fn cover_down(l: u64, mut x: u64, c: u64, max_layer: u32, out: &mut Vec<NodeId>) {
    while x > l {
        let mut j = max_layer;
        loop {
            let w = c.pow(j);
            if x.is_multiple_of(w) && x - w >= l {
                out.push(NodeId { layer: j, index: x / w - 1 });
                x -= w;
                break;
            }
            j -= 1;
        }
    }
}

/// Covers the unit range `(l, r]` with nodes of a `height`-layer hierarchy:
/// split at the multiple of the largest possible node width, then cover each
/// side greedily by c-ary digits. Nodes are returned in ascending time order.
pub fn cover_range(l: u64, r: u64, branching: u64, height: u32) -> Result<RangeCover> {
    if l >= r || branching < 2 || height < 1 {
        return Err(Error::InvalidParameter(format!(
            "cover needs l < r, branching >= 2, height >= 1 (got ({l}, {r}], {branching}, {height})"
        )));
    }
    let max_width = branching.saturating_pow(height);
    if r - l > max_width {
        return Err(Error::RangeTooWide { l, r, max_width });
    }
    let c = branching;
    // Widest layer with an aligned boundary inside [l, r].
    let top = (0..height)
        .rev()
        .find(|&j| {
            let w = c.pow(j);
            l.div_ceil(w) * w <= r
        })
        .expect("layer 0 always aligns");
    let w = c.pow(top);
    let split = l.div_ceil(w) * w;
    let mut left = Vec::new();
    cover_down(l, split, c, top, &mut left);
    left.reverse();
    cover_up(split, r, c, top, &mut left);
    Ok(RangeCover { nodes: left })
}

/// Unchecked c-ary decomposition of the prefix `(0, r]`, using as many
/// top-layer nodes as needed. Nodes are in ascending time order.
pub fn decompose(r: u64, branching: u64, height: u32) -> RangeCover {
    let mut nodes = Vec::new();
    if r > 0 {
        cover_up(0, r, branching, height - 1, &mut nodes);
    }
    RangeCover { nodes }
}

/// Exact and noisy change over one node's filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdcrNode {
    pub filter: TimeRangeFilter,
    pub exact: f64,
    pub noisy: f64,
}

/// Every node of a hierarchical release.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdcrTree {
    pub params: HdcrParams,
    pub noise: NoiseSpec,
    layers: Vec<Vec<HdcrNode>>,
}

impl HdcrTree {
    pub fn layers(&self) -> &[Vec<HdcrNode>] {
        &self.layers
    }

    pub fn node(&self, id: NodeId) -> Option<&HdcrNode> {
        self.layers.get(id.layer as usize)?.get(id.index as usize)
    }
}

pub(crate) fn node_stream(layer: u32, index: u64) -> u64 {
    (layer as u64) << 48 | index
}

/// Builds every node of the hierarchy with independent noise.
pub fn build_hdcr(
    log: &Changelog,
    p: &HdcrParams,
    spec: &LinearQuerySpec,
    noise_per_node: &NoiseSpec,
) -> Result<HdcrTree> {
    p.validate()?;
    noise_per_node.validate()?;
    let layers = (0..p.height)
        .map(|layer| {
            (0..p.layer_len(layer) as u64)
                .map(|index| {
                    let filter = p.node_filter(layer, index);
                    let exact = linear_query_change(log.filter(&filter), spec);
                    let mut stream = noise_per_node.stream(stream_id(HDCR_TAG, node_stream(layer, index)));
                    let noisy = perturb(exact, noise_per_node, &mut stream)?;
                    Ok(HdcrNode { filter, exact, noisy })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(HdcrTree {
        params: *p,
        noise: *noise_per_node,
        layers,
    })
}

/// Sum over a range cover of a tree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub noisy: f64,
    pub exact: f64,
    pub node_count: usize,
    pub variance: f64,
}

/// Answers the unit range `(l, r]` by summing the nodes of its cover.
pub fn aggregate(tree: &HdcrTree, l: u64, r: u64) -> Result<Aggregate> {
    let p = &tree.params;
    let limit = p.bottom_len();
    if r > limit {
        return Err(Error::RangeOutOfSpan { l, r, limit });
    }
    let cover = cover_range(l, r, p.branching, p.height)?;
    let (mut noisy, mut exact) = (0.0, 0.0);
    for id in &cover.nodes {
        let node = tree.node(*id).expect("cover stays inside the span");
        noisy += node.noisy;
        exact += node.exact;
    }
    Ok(Aggregate {
        noisy,
        exact,
        node_count: cover.len(),
        variance: cover.len() as f64 * tree.noise.variance(),
    })
}

/// Running totals `(start, start + r * interval]` for every bottom boundary
/// `r`, each summed over the c-ary decomposition of its prefix.
pub fn prefix_series(tree: &HdcrTree) -> ReleaseResult {
    let p = &tree.params;
    let records = (1..=p.bottom_len())
        .map(|r| {
            let cover = decompose(r, p.branching, p.height);
            let (mut noisy, mut exact) = (0.0, 0.0);
            for id in &cover.nodes {
                let node = tree.node(*id).expect("prefix stays inside the span");
                noisy += node.noisy;
                exact += node.exact;
            }
            QueryRecord {
                index: r as usize - 1,
                filter: p.range_filter(0, r).expect("r >= 1"),
                noisy,
                exact: Some(exact),
                node_count: Some(cover.len()),
                variance: cover.len() as f64 * tree.noise.variance(),
            }
        })
        .collect();
    ReleaseResult { records }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest `h >= 1` with `c^h >= ratio`.
pub fn ceil_log(ratio: u64, c: u64) -> u32 {
    let mut h = 0;
    let mut w = 1u64;
    while w < ratio {
        w = w.saturating_mul(c);
        h += 1;
    }
    h.max(1)
}

/// Tick granularity `gcd(W, P)` and height `max(1, ceil(log_c(W / gcd)))`
/// of the hierarchy a sliding-window release is derived from.
pub fn swcr_granularity(swcr: &SwcrParams, branching: u64) -> (i64, u32) {
    let dt = gcd(swcr.window as u64, swcr.period as u64);
    (dt as i64, ceil_log(swcr.window as u64 / dt, branching))
}

/// Hierarchy whose nodes answer every window of `swcr`.
pub fn swcr_hierarchy(swcr: &SwcrParams, branching: u64) -> Result<HdcrParams> {
    swcr.validate()?;
    let (dt, h) = swcr_granularity(swcr, branching);
    HdcrParams::new(
        h,
        branching,
        swcr.first - swcr.window,
        swcr.window + (swcr.count as i64 - 1) * swcr.period,
        dt,
    )
}

/// Sliding-window release answered from hierarchy nodes.
pub fn derive_swcr_from_hdcr(
    log: &Changelog,
    swcr: &SwcrParams,
    branching: u64,
    spec: &LinearQuerySpec,
    noise_per_node: &NoiseSpec,
) -> Result<ReleaseResult> {
    let p = swcr_hierarchy(swcr, branching)?;
    let tree = build_hdcr(log, &p, spec, noise_per_node)?;
    let step = (swcr.period / p.interval) as u64;
    let width = (swcr.window / p.interval) as u64;
    let filters = swcr.filters();
    let records = filters
        .into_iter()
        .enumerate()
        .map(|(i, filter)| {
            let l = i as u64 * step;
            let agg = aggregate(&tree, l, l + width)?;
            Ok(QueryRecord {
                index: i,
                filter,
                noisy: agg.noisy,
                exact: Some(agg.exact),
                node_count: Some(agg.node_count),
                variance: agg.variance,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReleaseResult { records })
}

/// Outcome of the hierarchical-versus-direct sliding-window comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs < rhs`, decided in exact integer arithmetic.
    pub hdcr_wins: bool,
    /// Per-node budget over per-window budget at equal total loss.
    pub epsilon_prime_factor: f64,
    pub height: u32,
    pub delta_t: i64,
}

/// Compares the worst-case window variance of a hierarchy-derived
/// sliding-window release with the direct one, at equal total privacy loss.
pub fn compare_hdcr_swcr(swcr: &SwcrParams, branching: u64, constraint: &MutationConstraint) -> Result<Comparison> {
    swcr.validate()?;
    constraint.validate()?;
    if branching < 2 {
        return Err(Error::InvalidParameter(format!("branching must be >= 2, got {branching}")));
    }
    let (dt, h) = swcr_granularity(swcr, branching);
    let c = branching as u128;
    let hh = h as u128;
    let wide = |v: i64| v as u128;
    match constraint {
        MutationConstraint::AtMostK { .. } => {
            let windows = wide(div_ceil(swcr.window, swcr.period));
            let lhs = 2 * (c - 1) * hh * hh * hh;
            let rhs = windows * windows;
            Ok(Comparison {
                lhs: lhs as f64,
                rhs: rhs as f64,
                hdcr_wins: lhs < rhs,
                epsilon_prime_factor: windows as f64 / h as f64,
                height: h,
                delta_t: dt,
            })
        }
        MutationConstraint::TimeBounded { b } => {
            let top = c.pow(h);
            let a = top - 1;
            let d = top - top / c;
            let k = wide(div_ceil(*b, dt));
            let windows = wide(div_ceil(swcr.window + b, swcr.period));
            let per_node_folds = a as f64 / d as f64 * k as f64 + h as f64;
            let scaled_lhs = 2 * (c - 1) * hh * (a * k + hh * d).pow(2);
            let scaled_rhs = windows * windows * d * d;
            Ok(Comparison {
                lhs: 2.0 * (c - 1) as f64 * h as f64 * per_node_folds * per_node_folds,
                rhs: (windows * windows) as f64,
                hdcr_wins: scaled_lhs < scaled_rhs,
                epsilon_prime_factor: windows as f64 / per_node_folds,
                height: h,
                delta_t: dt,
            })
        }
        MutationConstraint::Hybrid(_) => Err(Error::UnsupportedConstraint(
            "comparison needs an at-most-k or time-bounded constraint".into(),
        )),
    }
}
