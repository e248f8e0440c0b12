//! Synthetic dynamic databases that satisfy a declared constraint by
//! construction.

use dpcr::changelog::{constraint_violations, Changelog, Mutation, MutationConstraint};
use dpcr::rr::{AnswerLog, ResponseSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GeneratorConfig;

/// Mutation times of one entry: an insertion, then further changes while a
/// coin with the mutation rate keeps coming up heads and the constraint
/// leaves room. Hybrids are generated under their first branch.
fn entry_times(rng: &mut impl Rng, cfg: &GeneratorConfig, c: &MutationConstraint) -> Vec<i64> {
    let mut c = c;
    while let MutationConstraint::Hybrid(list) = c {
        c = &list[0];
    }
    let t0 = rng.gen_range(0..cfg.horizon);
    let (max_count, deadline) = match *c {
        MutationConstraint::AtMostK { k } => (k as usize, cfg.horizon - 1),
        MutationConstraint::TimeBounded { b } => (usize::MAX, (t0 + b).min(cfg.horizon - 1)),
        MutationConstraint::Hybrid(_) => unreachable!(),
    };
    let max_gap = (cfg.horizon / 10).max(1);
    let mut times = vec![t0];
    while times.len() < max_count && rng.gen_bool(cfg.mutation_rate) {
        let next = times[times.len() - 1] + rng.gen_range(1..=max_gap);
        if next > deadline {
            break;
        }
        times.push(next);
    }
    times
}

fn entry_rng(seed: u64, entry: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(entry as u64);
    rng
}

fn entry_id(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("e{i:0width$}")
}

pub fn generate_changelog(cfg: &GeneratorConfig, c: &MutationConstraint, seed: u64) -> anyhow::Result<Changelog> {
    let [lo, hi] = cfg.value_range;
    let mut muts = Vec::new();
    for i in 0..cfg.n_entries {
        let mut rng = entry_rng(seed, i);
        let id = entry_id(i, cfg.n_entries);
        let times = entry_times(&mut rng, cfg, c);
        let value = |rng: &mut ChaCha8Rng| (rng.gen_range(lo..=hi) * 1000.0).round() / 1000.0;
        let mut cur = value(&mut rng);
        muts.push(Mutation::insert(id.as_str(), times[0], cur)?);
        for (j, t) in times.iter().enumerate().skip(1) {
            if j + 1 == times.len() && rng.gen_bool(0.25) {
                muts.push(Mutation::delete(id.as_str(), *t, cur)?);
            } else {
                let next = value(&mut rng);
                muts.push(Mutation::modify(id.as_str(), *t, cur, next)?);
                cur = next;
            }
        }
    }
    let log = Changelog::from_unsorted(muts)?;
    let bad = constraint_violations(&log, c);
    anyhow::ensure!(bad.is_empty(), "generator produced {} entries violating {c}", bad.len());
    Ok(log)
}

pub fn generate_answers(
    cfg: &GeneratorConfig,
    c: &MutationConstraint,
    space: &ResponseSpace,
    seed: u64,
) -> anyhow::Result<AnswerLog> {
    let z = space.len();
    let labels = space.labels();
    let mut log = AnswerLog::new(space.clone());
    for i in 0..cfg.n_entries {
        let mut rng = entry_rng(seed, i);
        let id = entry_id(i, cfg.n_entries);
        let times = entry_times(&mut rng, cfg, c);
        let mut cur = rng.gen_range(0..z);
        log.push(id.as_str(), times[0], Some(&labels[cur]))?;
        for (j, t) in times.iter().enumerate().skip(1) {
            if j + 1 == times.len() && rng.gen_bool(0.25) {
                log.push(id.as_str(), *t, None)?;
            } else {
                cur = (cur + rng.gen_range(1..z)) % z;
                log.push(id.as_str(), *t, Some(&labels[cur]))?;
            }
        }
    }
    let bad = constraint_violations(&log.to_changelog()?, c);
    anyhow::ensure!(bad.is_empty(), "generator produced {} entries violating {c}", bad.len());
    Ok(log)
}
