//! Dynamic databases as changelogs.
//!
//! Every change to an entry is recorded as a [`Mutation`] in "value change"
//! form (`prev -> new`), where an absent `prev` marks an insertion and an
//! absent `new` marks a deletion. A [`Changelog`] keeps mutations sorted by
//! time and then by entry id, and the state of the database at any time is
//! the empty snapshot with every mutation up to that time applied.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Abstract integer time tick.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn ticks(self) -> i64 {
        self.0
    }
}

impl Add<i64> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: i64) -> Timestamp {
        Timestamp(self.0 + rhs)
    }
}

impl Sub<i64> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: i64) -> Timestamp {
        Timestamp(self.0 - rhs)
    }
}

impl Sub for Timestamp {
    type Output = i64;
    fn sub(self, rhs: Timestamp) -> i64 {
        self.0 - rhs.0
    }
}

impl From<i64> for Timestamp {
    fn from(t: i64) -> Self {
        Timestamp(t)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Opaque entry identifier. Ordering is lexicographic.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(String);

impl EntryId {
    pub fn new(id: impl Into<String>) -> Self {
        EntryId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for EntryId {
    fn from(s: &str) -> Self {
        EntryId(s.to_owned())
    }
}

impl From<String> for EntryId {
    fn from(s: String) -> Self {
        EntryId(s)
    }
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MutationKind {
    Insert,
    Modify,
    Delete,
}

/// One entry's change at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Mutation {
    entry: EntryId,
    time: Timestamp,
    prev: Option<f64>,
    new: Option<f64>,
}

impl Mutation {
    pub fn new(
        entry: impl Into<EntryId>,
        time: impl Into<Timestamp>,
        prev: Option<f64>,
        new: Option<f64>,
    ) -> Result<Self> {
        let entry = entry.into();
        if prev.is_none() && new.is_none() {
            return Err(Error::InvalidMutation(format!(
                "mutation of {entry} has neither a previous nor a new value"
            )));
        }
        if prev.is_some_and(|v| !v.is_finite()) || new.is_some_and(|v| !v.is_finite()) {
            return Err(Error::InvalidMutation(format!(
                "mutation of {entry} carries a non-finite value"
            )));
        }
        Ok(Mutation {
            entry,
            time: time.into(),
            prev,
            new,
        })
    }

    pub fn insert(entry: impl Into<EntryId>, time: impl Into<Timestamp>, value: f64) -> Result<Self> {
        Self::new(entry, time, None, Some(value))
    }

    pub fn modify(
        entry: impl Into<EntryId>,
        time: impl Into<Timestamp>,
        prev: f64,
        new: f64,
    ) -> Result<Self> {
        Self::new(entry, time, Some(prev), Some(new))
    }

    pub fn delete(entry: impl Into<EntryId>, time: impl Into<Timestamp>, prev: f64) -> Result<Self> {
        Self::new(entry, time, Some(prev), None)
    }

    pub fn entry(&self) -> &EntryId {
        &self.entry
    }

    pub fn time(&self) -> Timestamp {
        self.time
    }

    pub fn prev(&self) -> Option<f64> {
        self.prev
    }

    pub fn new_value(&self) -> Option<f64> {
        self.new
    }

    pub fn kind(&self) -> MutationKind {
        match (self.prev, self.new) {
            (None, _) => MutationKind::Insert,
            (_, None) => MutationKind::Delete,
            _ => MutationKind::Modify,
        }
    }

    fn sort_key(&self) -> (Timestamp, &EntryId) {
        (self.time, &self.entry)
    }
}

/// Wire form of a mutation: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct MutationRecord {
    entry: EntryId,
    t: i64,
    prev: Option<f64>,
    new: Option<f64>,
}

impl From<&Mutation> for MutationRecord {
    fn from(m: &Mutation) -> Self {
        MutationRecord {
            entry: m.entry.clone(),
            t: m.time.0,
            prev: m.prev,
            new: m.new,
        }
    }
}

/// State of the database at one point in time: entry id to current value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatabaseSnapshot(BTreeMap<EntryId, f64>);

impl DatabaseSnapshot {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, entry: &EntryId) -> Option<f64> {
        self.0.get(entry).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EntryId, f64)> {
        self.0.iter().map(|(k, v)| (k, *v))
    }

    fn apply_one(&mut self, index: usize, m: &Mutation) -> Result<()> {
        let current = self.0.get(&m.entry).copied();
        if current != m.prev {
            let reason = match (current, m.prev) {
                (Some(v), None) => format!("insertion of an entry that already holds {v}"),
                (None, Some(p)) => format!("expected absent entry, mutation claims previous value {p}"),
                (Some(v), Some(p)) => format!("current value {v} but mutation claims {p}"),
                (None, None) => unreachable!(),
            };
            return Err(Error::Consistency {
                index,
                entry: m.entry.clone(),
                time: m.time,
                reason,
            });
        }
        match m.new {
            Some(v) => self.0.insert(m.entry.clone(), v),
            None => self.0.remove(&m.entry),
        };
        Ok(())
    }
}

/// Applies `mutations` in order to a copy of `snapshot`.
pub fn apply_mutations(snapshot: &DatabaseSnapshot, mutations: &[Mutation]) -> Result<DatabaseSnapshot> {
    let mut next = snapshot.clone();
    for (index, m) in mutations.iter().enumerate() {
        next.apply_one(index, m)?;
    }
    Ok(next)
}

/// Half-open time range `(start, end]`; a missing start means `-inf`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeRangeFilter {
    start: Option<Timestamp>,
    end: Timestamp,
}

impl TimeRangeFilter {
    pub fn new(start: impl Into<Timestamp>, end: impl Into<Timestamp>) -> Result<Self> {
        let (start, end) = (start.into(), end.into());
        if start >= end {
            return Err(Error::InvalidParameter(format!(
                "time range ({start}, {end}] is empty"
            )));
        }
        Ok(TimeRangeFilter {
            start: Some(start),
            end,
        })
    }

    /// `(-inf, end]`.
    pub fn up_to(end: impl Into<Timestamp>) -> Self {
        TimeRangeFilter {
            start: None,
            end: end.into(),
        }
    }

    pub fn start(&self) -> Option<Timestamp> {
        self.start
    }

    pub fn end(&self) -> Timestamp {
        self.end
    }

    pub fn accepts(&self, t: Timestamp) -> bool {
        self.start.is_none_or(|s| s < t) && t <= self.end
    }
}

impl fmt::Display for TimeRangeFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.start {
            Some(s) => write!(f, "({s}, {}]", self.end),
            None => write!(f, "(-inf, {}]", self.end),
        }
    }
}

/// Time-sorted, chain-consistent sequence of mutations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Changelog {
    mutations: Vec<Mutation>,
}

impl Changelog {
    /// Builds a changelog from mutations already sorted by `(time, entry)`.
    pub fn new(mutations: Vec<Mutation>) -> Result<Self> {
        for (i, pair) in mutations.windows(2).enumerate() {
            if pair[0].sort_key() >= pair[1].sort_key() {
                return Err(Error::Unsorted(i + 1));
            }
        }
        apply_mutations(&DatabaseSnapshot::empty(), &mutations)?;
        Ok(Changelog { mutations })
    }

    /// Sorts the mutations first; chain consistency is still enforced.
    pub fn from_unsorted(mut mutations: Vec<Mutation>) -> Result<Self> {
        mutations.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Self::new(mutations)
    }

    pub fn mutations(&self) -> &[Mutation] {
        &self.mutations
    }

    pub fn len(&self) -> usize {
        self.mutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mutations.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Mutation> {
        self.mutations.iter()
    }

    pub fn contains_entry(&self, entry: &EntryId) -> bool {
        self.mutations.iter().any(|m| &m.entry == entry)
    }

    /// Mutations grouped per entry, each group in time order.
    pub fn by_entry(&self) -> BTreeMap<&EntryId, Vec<&Mutation>> {
        let mut groups: BTreeMap<&EntryId, Vec<&Mutation>> = BTreeMap::new();
        for m in &self.mutations {
            groups.entry(&m.entry).or_default().push(m);
        }
        groups
    }

    pub fn entry_mutations(&self, entry: &EntryId) -> Vec<Mutation> {
        self.mutations.iter().filter(|m| &m.entry == entry).cloned().collect()
    }

    /// The mutations accepted by `f`, in log order.
    pub fn filter(&self, f: &TimeRangeFilter) -> &[Mutation] {
        let lo = match f.start {
            Some(s) => self.mutations.partition_point(|m| m.time <= s),
            None => 0,
        };
        let hi = self.mutations.partition_point(|m| m.time <= f.end);
        &self.mutations[lo..hi.max(lo)]
    }

    /// Database state after every mutation at or before `t`.
    pub fn snapshot_at(&self, t: Timestamp) -> DatabaseSnapshot {
        apply_mutations(&DatabaseSnapshot::empty(), self.filter(&TimeRangeFilter::up_to(t)))
            .expect("changelog is consistent by construction")
    }

    /// Reads JSON Lines. Input must already be sorted; blank lines are skipped.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut mutations = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MutationRecord =
                serde_json::from_str(&line).map_err(|source| Error::Parse { line: i + 1, source })?;
            let m = Mutation::new(rec.entry, rec.t, rec.prev, rec.new)?;
            if let Some(last) = mutations.last() {
                if Mutation::sort_key(last) >= m.sort_key() {
                    return Err(Error::Unsorted(i + 1));
                }
            }
            mutations.push(m);
        }
        Self::new(mutations)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for m in &self.mutations {
            serde_json::to_writer(&mut writer, &MutationRecord::from(m))
                .map_err(std::io::Error::from)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Changelog {
    type Item = &'a Mutation;
    type IntoIter = std::slice::Iter<'a, Mutation>;
    fn into_iter(self) -> Self::IntoIter {
        self.mutations.iter()
    }
}

/// Merges the full mutation history of one new entry into `base`.
pub fn adjacent_changelog(base: &Changelog, entry_muts: &[Mutation]) -> Result<Changelog> {
    let Some(first) = entry_muts.first() else {
        return Ok(base.clone());
    };
    let entry = first.entry.clone();
    if let Some(other) = entry_muts.iter().find(|m| m.entry != entry) {
        return Err(Error::InvalidMutation(format!(
            "adjacent entry history mixes {entry} and {}",
            other.entry
        )));
    }
    if base.contains_entry(&entry) {
        return Err(Error::DuplicateEntry(entry));
    }
    // Validates the entry's own chain and ordering.
    Changelog::new(entry_muts.to_vec())?;

    let mut merged = Vec::with_capacity(base.len() + entry_muts.len());
    let (mut a, mut b) = (base.mutations.iter().peekable(), entry_muts.iter().peekable());
    while let (Some(x), Some(y)) = (a.peek(), b.peek()) {
        if x.sort_key() < y.sort_key() {
            merged.push(a.next().unwrap().clone());
        } else {
            merged.push(b.next().unwrap().clone());
        }
    }
    merged.extend(a.cloned());
    merged.extend(b.cloned());
    Ok(Changelog { mutations: merged })
}

/// Removes every mutation of `entry`; the inverse of [`adjacent_changelog`].
pub fn strip_entry(log: &Changelog, entry: &EntryId) -> Changelog {
    Changelog {
        mutations: log.mutations.iter().filter(|m| &m.entry != entry).cloned().collect(),
    }
}

/// Constraint on how an entry may mutate over its lifetime.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationConstraint {
    /// At most `k` mutations in total, the insertion included.
    AtMostK { k: u64 },
    /// Every mutation happens within `b` ticks of the first insertion.
    TimeBounded { b: i64 },
    /// Each entry satisfies at least one of the listed constraints.
    Hybrid(Vec<MutationConstraint>),
}

impl MutationConstraint {
    pub fn validate(&self) -> Result<()> {
        match self {
            MutationConstraint::AtMostK { k: 0 } => {
                Err(Error::InvalidParameter("at-most-k requires k >= 1".into()))
            }
            MutationConstraint::TimeBounded { b } if *b < 0 => {
                Err(Error::InvalidParameter(format!("time bound must be >= 0, got {b}")))
            }
            MutationConstraint::Hybrid(list) if list.is_empty() => {
                Err(Error::InvalidParameter("hybrid constraint needs at least one branch".into()))
            }
            MutationConstraint::Hybrid(list) => list.iter().try_for_each(Self::validate),
            _ => Ok(()),
        }
    }

    /// Whether one entry's time-ordered mutations satisfy the constraint.
    pub fn admits(&self, history: &[&Mutation]) -> bool {
        match self {
            MutationConstraint::AtMostK { k } => history.len() as u64 <= *k,
            MutationConstraint::TimeBounded { b } => match (history.first(), history.last()) {
                (Some(first), Some(last)) => last.time - first.time <= *b,
                _ => true,
            },
            MutationConstraint::Hybrid(list) => list.iter().any(|c| c.admits(history)),
        }
    }
}

impl fmt::Display for MutationConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MutationConstraint::AtMostK { k } => write!(f, "at-most-{k}"),
            MutationConstraint::TimeBounded { b } => write!(f, "{b}-time-bounded"),
            MutationConstraint::Hybrid(list) => {
                f.write_str("hybrid[")?;
                for (i, c) in list.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("]")
            }
        }
    }
}

/// Per-entry verdict of `c` over the whole log.
pub fn validate_constraint(log: &Changelog, c: &MutationConstraint) -> BTreeMap<EntryId, bool> {
    log.by_entry()
        .into_iter()
        .map(|(id, history)| (id.clone(), c.admits(&history)))
        .collect()
}

/// Entries of `log` that violate `c`.
pub fn constraint_violations(log: &Changelog, c: &MutationConstraint) -> Vec<EntryId> {
    validate_constraint(log, c)
        .into_iter()
        .filter_map(|(id, ok)| (!ok).then_some(id))
        .collect()
}

/// Count of mutations per entry; handy for generators and reports.
pub fn mutation_counts(log: &Changelog) -> HashMap<EntryId, usize> {
    let mut counts = HashMap::new();
    for m in log {
        *counts.entry(m.entry.clone()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: i64) -> Timestamp {
        Timestamp(v)
    }

    fn sample_log() -> Changelog {
        Changelog::new(vec![
            Mutation::insert("a", 1, 3.0).unwrap(),
            Mutation::insert("b", 1, 5.0).unwrap(),
            Mutation::modify("a", 2, 3.0, 7.0).unwrap(),
            Mutation::delete("a", 3, 7.0).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn apply_insert_modify_delete() {
        let s0 = DatabaseSnapshot::empty();
        let s1 = apply_mutations(&s0, &[Mutation::insert("x", 1, 50.0).unwrap()]).unwrap();
        assert_eq!(s1.get(&"x".into()), Some(50.0));
        let s2 = apply_mutations(&s1, &[Mutation::modify("x", 2, 50.0, 100.0).unwrap()]).unwrap();
        assert_eq!(s2.get(&"x".into()), Some(100.0));
        let s3 = apply_mutations(&s2, &[Mutation::delete("x", 3, 100.0).unwrap()]).unwrap();
        assert!(s3.is_empty());
        // value semantics
        assert_eq!(s1.get(&"x".into()), Some(50.0));
        assert!(s0.is_empty());
    }

    #[test]
    fn apply_reports_first_offending_mutation() {
        let muts = [
            Mutation::insert("x", 1, 1.0).unwrap(),
            Mutation::modify("x", 2, 1.0, 2.0).unwrap(),
            Mutation::modify("x", 3, 9.0, 4.0).unwrap(),
        ];
        match apply_mutations(&DatabaseSnapshot::empty(), &muts) {
            Err(Error::Consistency { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        let dup = [
            Mutation::insert("x", 1, 1.0).unwrap(),
            Mutation::insert("x", 2, 1.0).unwrap(),
        ];
        assert!(matches!(
            apply_mutations(&DatabaseSnapshot::empty(), &dup),
            Err(Error::Consistency { index: 1, .. })
        ));
    }

    #[test]
    fn null_to_null_mutation_rejected() {
        assert!(Mutation::new("x", 1, None, None).is_err());
        assert!(Mutation::new("x", 1, Some(f64::NAN), None).is_err());
    }

    #[test]
    fn reinsertion_after_deletion_is_consistent() {
        let log = Changelog::new(vec![
            Mutation::insert("a", 1, 1.0).unwrap(),
            Mutation::delete("a", 2, 1.0).unwrap(),
            Mutation::insert("a", 3, 4.0).unwrap(),
        ]);
        assert!(log.is_ok());
    }

    #[test]
    fn new_rejects_unsorted_and_duplicate_keys() {
        let unsorted = vec![
            Mutation::insert("b", 2, 1.0).unwrap(),
            Mutation::insert("a", 1, 1.0).unwrap(),
        ];
        assert!(matches!(Changelog::new(unsorted.clone()), Err(Error::Unsorted(1))));
        assert!(Changelog::from_unsorted(unsorted).is_ok());
        // same time: ties broken by entry id
        let tie = vec![
            Mutation::insert("b", 1, 1.0).unwrap(),
            Mutation::insert("a", 1, 1.0).unwrap(),
        ];
        assert!(Changelog::new(tie).is_err());
        let dup = vec![
            Mutation::insert("a", 1, 1.0).unwrap(),
            Mutation::modify("a", 1, 1.0, 2.0).unwrap(),
        ];
        assert!(Changelog::new(dup).is_err());
    }

    #[test]
    fn filter_half_open_boundaries() {
        let log = Changelog::new(vec![
            Mutation::insert("a", 1, 1.0).unwrap(),
            Mutation::insert("b", 2, 1.0).unwrap(),
            Mutation::insert("c", 3, 1.0).unwrap(),
        ])
        .unwrap();
        let got: Vec<i64> = log
            .filter(&TimeRangeFilter::new(1, 3).unwrap())
            .iter()
            .map(|m| m.time().0)
            .collect();
        assert_eq!(got, vec![2, 3]);
        assert_eq!(log.filter(&TimeRangeFilter::up_to(2)).len(), 2);
        assert_eq!(log.filter(&TimeRangeFilter::up_to(0)).len(), 0);
        assert_eq!(log.filter(&TimeRangeFilter::new(3, 9).unwrap()).len(), 0);
    }

    #[test]
    fn disjoint_filters_partition() {
        let log = Changelog::new(vec![
            Mutation::insert("a", 1, 1.0).unwrap(),
            Mutation::insert("b", 2, 1.0).unwrap(),
        ])
        .unwrap();
        let f1 = TimeRangeFilter::new(0, 1).unwrap();
        let f2 = TimeRangeFilter::new(1, 2).unwrap();
        for m in &log {
            let hits = [f1, f2].iter().filter(|f| f.accepts(m.time())).count();
            assert_eq!(hits, 1);
        }
        assert_eq!(log.filter(&f1).len() + log.filter(&f2).len(), log.len());
    }

    #[test]
    fn empty_range_rejected() {
        assert!(TimeRangeFilter::new(3, 3).is_err());
        assert!(TimeRangeFilter::new(4, 3).is_err());
    }

    #[test]
    fn adjacency_round_trip() {
        let base = Changelog::new(vec![Mutation::insert("a", 1, 1.0).unwrap()]).unwrap();
        let extra = vec![
            Mutation::insert("b", 0, 2.0).unwrap(),
            Mutation::modify("b", 1, 2.0, 3.0).unwrap(),
            Mutation::delete("b", 5, 3.0).unwrap(),
        ];
        let merged = adjacent_changelog(&base, &extra).unwrap();
        assert_eq!(merged.len(), base.len() + 3);
        let keys: Vec<(i64, &str)> = merged.iter().map(|m| (m.time().0, m.entry().as_str())).collect();
        assert_eq!(keys, vec![(0, "b"), (1, "a"), (1, "b"), (5, "b")]);
        assert_eq!(strip_entry(&merged, &"b".into()), base);
        assert!(matches!(
            adjacent_changelog(&merged, &extra),
            Err(Error::DuplicateEntry(_))
        ));
    }

    #[test]
    fn constraint_verdicts() {
        let log = sample_log();
        let v = validate_constraint(&log, &MutationConstraint::AtMostK { k: 2 });
        assert!(!v[&EntryId::from("a")]);
        assert!(v[&EntryId::from("b")]);

        let two = Changelog::new(vec![
            Mutation::insert("x", 0, 1.0).unwrap(),
            Mutation::modify("x", 5, 1.0, 2.0).unwrap(),
        ])
        .unwrap();
        assert!(validate_constraint(&two, &MutationConstraint::AtMostK { k: 2 })[&"x".into()]);
        assert!(!validate_constraint(&two, &MutationConstraint::TimeBounded { b: 4 })[&"x".into()]);
        assert!(validate_constraint(&two, &MutationConstraint::TimeBounded { b: 5 })[&"x".into()]);
    }

    #[test]
    fn hybrid_passes_if_any_branch_passes() {
        // 3 mutations spanning 8 ticks: fails at-most-1, passes 10-time-bounded
        let log = Changelog::new(vec![
            Mutation::insert("x", 2, 1.0).unwrap(),
            Mutation::modify("x", 6, 1.0, 2.0).unwrap(),
            Mutation::modify("x", 10, 2.0, 3.0).unwrap(),
        ])
        .unwrap();
        let hybrid = MutationConstraint::Hybrid(vec![
            MutationConstraint::AtMostK { k: 1 },
            MutationConstraint::TimeBounded { b: 10 },
        ]);
        let h = |c: &MutationConstraint| validate_constraint(&log, c)[&EntryId::from("x")];
        assert!(!h(&MutationConstraint::AtMostK { k: 1 }));
        assert!(h(&MutationConstraint::TimeBounded { b: 10 }));
        assert!(h(&hybrid));
        assert!(!h(&MutationConstraint::Hybrid(vec![
            MutationConstraint::AtMostK { k: 1 },
            MutationConstraint::TimeBounded { b: 7 },
        ])));
    }

    #[test]
    fn constraint_parameter_validation() {
        assert!(MutationConstraint::AtMostK { k: 0 }.validate().is_err());
        assert!(MutationConstraint::TimeBounded { b: -1 }.validate().is_err());
        assert!(MutationConstraint::Hybrid(vec![]).validate().is_err());
        assert!(MutationConstraint::TimeBounded { b: 0 }.validate().is_ok());
    }

    #[test]
    fn jsonl_round_trip_and_unsorted_rejection() {
        let log = sample_log();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"prev\":null"));
        let back = Changelog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, log);

        let unsorted = "{\"entry\":\"a\",\"t\":2,\"prev\":null,\"new\":1}\n\
                        {\"entry\":\"b\",\"t\":1,\"prev\":null,\"new\":1}\n";
        assert!(matches!(
            Changelog::read_jsonl(unsorted.as_bytes()),
            Err(Error::Unsorted(2))
        ));
        let bad = "{\"entry\":\"a\",\"t\":\"x\"}\n";
        assert!(matches!(
            Changelog::read_jsonl(bad.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn snapshot_at_matches_incremental_fold() {
        let log = sample_log();
        let direct = log.snapshot_at(t(2));
        let first = apply_mutations(&DatabaseSnapshot::empty(), log.filter(&TimeRangeFilter::up_to(1))).unwrap();
        let second = apply_mutations(&first, log.filter(&TimeRangeFilter::new(1, 2).unwrap())).unwrap();
        assert_eq!(direct, second);
        assert_eq!(direct.get(&"a".into()), Some(7.0));
    }
}
