use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use dpcr::accountant::{
    dcr_bound, dcr_folds, hdcr_bound, hdcr_folds, hdcr_time_bounded_estimate, local_bound, swcr_bound, swcr_folds, CompositionStrategy,
    HdcrParams, PrivacyLoss,
};
use dpcr::changelog::{constraint_violations, Changelog, MutationConstraint};
use dpcr::engines::{
    build_hdcr, compare_hdcr_swcr, derive_swcr_from_hdcr, prefix_series, run_dcr, run_swcr, swcr_hierarchy,
    ReleaseResult,
};
use dpcr::mechanisms::NoiseSpec;
use dpcr::oracles::{monte_carlo_vector, run_suite, SuiteOptions};
use dpcr::rr::{rr_dcr, rr_hdcr, write_rr_csv, AnswerLog, RrPoint};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{field, Format, ReleaseConfig, ReleaseKind, SimConfig};
use crate::generate::{generate_answers, generate_changelog};
use crate::CliError;

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn generate(cfg: &SimConfig, out: &Path) -> anyhow::Result<()> {
    let seed = cfg.seed()?;
    let c = cfg.constraint()?;
    let mut w = create(out)?;
    if cfg.generator.answers.is_some() {
        let log = generate_answers(&cfg.generator, c, &cfg.answers()?, seed)?;
        log.write_jsonl(&mut w)?;
        eprintln!("wrote answer timelines of {} entries to {}", log.entries(), out.display());
    } else {
        let log = generate_changelog(&cfg.generator, c, seed)?;
        log.write_jsonl(&mut w)?;
        eprintln!("wrote {} mutations to {}", log.len(), out.display());
    }
    w.flush()?;
    Ok(())
}

/// Metadata written ahead of every result set.
#[derive(Serialize)]
struct Header<'a> {
    seed: u64,
    kind: ReleaseKind,
    constraint: &'a MutationConstraint,
    per_query: PrivacyLoss,
    folds: u64,
    local: bool,
    total_loss: PrivacyLoss,
    queries: usize,
    include_exact: bool,
    release: &'a ReleaseConfig,
}

/// Fold count and total loss of the configured release.
fn accounted(cfg: &SimConfig, c: &MutationConstraint) -> anyhow::Result<(PrivacyLoss, u64, PrivacyLoss)> {
    let r = &cfg.release;
    let per = PrivacyLoss::new(r.epsilon, r.delta).map_err(|e| field("release.epsilon", e))?;
    let s = &r.composition;
    let (folds, global) = match r.kind {
        ReleaseKind::Dcr | ReleaseKind::RrDcr => {
            let sched = r.schedule()?;
            (dcr_folds(&sched, c), dcr_bound(&sched, per, c, s)?)
        }
        ReleaseKind::Swcr => {
            let p = r.swcr()?;
            (swcr_folds(&p, c), swcr_bound(&p, per, c, s)?)
        }
        ReleaseKind::Hdcr | ReleaseKind::RrHdcr => {
            let p = r.hdcr()?;
            (hdcr_folds(&p, c), hdcr_bound(&p, per, c, s)?)
        }
    };
    if r.local {
        Ok((per, 2 * folds, local_bound(folds, per, s)?))
    } else {
        Ok((per, folds, global))
    }
}

fn check_constraint(log: &Changelog, c: &MutationConstraint) -> Result<(), CliError> {
    let bad = constraint_violations(log, c);
    if bad.is_empty() {
        return Ok(());
    }
    let shown: Vec<String> = bad.iter().take(5).map(ToString::to_string).collect();
    Err(CliError::Constraint(format!(
        "{} entries violate the declared {c} constraint (first: {}); refusing to report a bound",
        bad.len(),
        shown.join(", ")
    )))
}

#[derive(Serialize)]
struct RrRow<'a> {
    t: i64,
    values: &'a [f64],
    variances: Vec<f64>,
    node_count: usize,
}

enum Rows {
    Release(ReleaseResult),
    Rr(Vec<RrPoint>),
}

pub fn run(cfg: &SimConfig, input: &Path) -> anyhow::Result<()> {
    let seed = cfg.seed()?;
    let c = cfg.constraint()?;
    let r = &cfg.release;
    let rows = if r.kind.is_rr() {
        let log = AnswerLog::read_jsonl(open(input)?, cfg.answers()?)?;
        check_constraint(&log.to_changelog()?, c)?;
        Rows::Rr(match r.kind {
            ReleaseKind::RrDcr => rr_dcr(&log, &r.schedule()?, r.epsilon, seed)?.1,
            _ => rr_hdcr(&log, &r.hdcr()?, r.epsilon, seed)?,
        })
    } else {
        let log = Changelog::read_jsonl(open(input)?)?;
        check_constraint(&log, c)?;
        let noise = NoiseSpec::laplace(r.epsilon, r.query.sensitivity(), seed).map_err(|e| field("release", e))?;
        let out = match r.kind {
            ReleaseKind::Dcr => run_dcr(&log, &r.schedule()?, &r.query, &noise)?,
            ReleaseKind::Swcr => run_swcr(&log, &r.swcr()?, &r.query, &noise)?,
            _ => prefix_series(&build_hdcr(&log, &r.hdcr()?, &r.query, &noise)?),
        };
        Rows::Release(if cfg.output.include_exact { out } else { out.redacted() })
    };
    let (per_query, folds, total_loss) = accounted(cfg, c)?;
    let header = Header {
        seed,
        kind: r.kind,
        constraint: c,
        per_query,
        folds,
        local: r.local,
        total_loss,
        queries: match &rows {
            Rows::Release(out) => out.len(),
            Rows::Rr(points) => points.len(),
        },
        include_exact: cfg.output.include_exact && !r.kind.is_rr(),
        release: r,
    };

    let mut w: Box<dyn Write> = match &cfg.output.path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let meta = serde_json::to_string(&header)?;
    match cfg.output.format {
        Format::Csv => writeln!(w, "# {meta}")?,
        Format::Jsonl => writeln!(w, "{{\"header\":{meta}}}")?,
    }
    match (&rows, cfg.output.format) {
        (Rows::Release(out), Format::Csv) => out.write_csv(&mut w)?,
        (Rows::Release(out), Format::Jsonl) => out.write_jsonl(&mut w)?,
        (Rows::Rr(points), Format::Csv) => write_rr_csv(points, &cfg.answers()?, &mut w)?,
        (Rows::Rr(points), Format::Jsonl) => {
            for p in points {
                let row = RrRow {
                    t: p.t.0,
                    values: p.estimate.values.as_slice(),
                    variances: p.estimate.variances(),
                    node_count: p.node_count,
                };
                serde_json::to_writer(&mut w, &row)?;
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    eprintln!("accounted loss {total_loss} ({folds} folds of {per_query})");
    Ok(())
}

fn loss_cells(loss: PrivacyLoss) -> String {
    format!("{:>12.6} {:>12.3e}", loss.epsilon(), loss.delta())
}

fn hierarchy_for(r: &ReleaseConfig, branching: u64) -> anyhow::Result<HdcrParams> {
    Ok(HdcrParams::new(r.height, branching, r.start, r.horizon, r.interval).map_err(|e| field("release", e))?)
}

pub fn account(cfg: &SimConfig, branchings: &[u64]) -> anyhow::Result<()> {
    let c = cfg.constraint()?;
    let r = &cfg.release;
    let per = PrivacyLoss::new(r.epsilon, r.delta).map_err(|e| field("release.epsilon", e))?;
    let s = &r.composition;
    let sched = r.schedule()?;
    let swcr = r.swcr()?;

    let mut out = io::stdout().lock();
    writeln!(out, "per-query loss {per}, composition {}", describe(s))?;
    writeln!(
        out,
        "{:<34} {:<36} {:>6} {:>12} {:>12} {:>7} {:>12} {:>12}",
        "release", "constraint", "folds", "eps", "delta", "local", "local eps", "local delta"
    )?;
    let mut rows: Vec<&MutationConstraint> = vec![c];
    if let MutationConstraint::Hybrid(list) = c {
        rows.extend(list.iter());
    }
    for &g in &rows {
        let line = |out: &mut dyn Write, name: String, folds: u64, global: PrivacyLoss| -> anyhow::Result<()> {
            let local = local_bound(folds, per, s)?;
            writeln!(
                out,
                "{name:<34} {:<36} {folds:>6} {} {:>7} {}",
                g.to_string(),
                loss_cells(global),
                2 * folds,
                loss_cells(local)
            )?;
            Ok(())
        };
        line(
            &mut out,
            format!("dcr W={} n={}", r.interval, r.count),
            dcr_folds(&sched, g),
            dcr_bound(&sched, per, g, s)?,
        )?;
        line(
            &mut out,
            format!("swcr P={} W={} n={}", r.period, r.window, r.count),
            swcr_folds(&swcr, g),
            swcr_bound(&swcr, per, g, s)?,
        )?;
        for &b in branchings {
            let p = hierarchy_for(r, b)?;
            line(
                &mut out,
                format!("hdcr h={} c={b} T={} W={}", p.height, p.horizon, p.interval),
                hdcr_folds(&p, g),
                hdcr_bound(&p, per, g, s)?,
            )?;
            if let MutationConstraint::TimeBounded { b: span } = g {
                writeln!(out, "{:<34} geometric estimate {:.2} folds", "", hdcr_time_bounded_estimate(&p, *span))?;
            }
        }
    }

    writeln!(out)?;
    writeln!(
        out,
        "{:<20} {:<6} {:>4} {:>4} {:>14} {:>14} {:>10} {:>10}",
        "constraint", "c", "h", "dT", "lhs", "rhs", "hdcr wins", "eps'/eps"
    )?;
    // The comparison is defined per single constraint; hybrids list their branches.
    for g in rows.iter().filter(|g| !matches!(g, MutationConstraint::Hybrid(_))) {
        for &b in branchings {
            let cmp = compare_hdcr_swcr(&swcr, b, g)?;
            writeln!(
                out,
                "{:<20} {b:<6} {:>4} {:>4} {:>14.3} {:>14.3} {:>10} {:>10.4}",
                g.to_string(),
                cmp.height,
                cmp.delta_t,
                cmp.lhs,
                cmp.rhs,
                cmp.hdcr_wins,
                cmp.epsilon_prime_factor
            )?;
        }
    }
    Ok(())
}

fn describe(s: &CompositionStrategy) -> String {
    match s {
        CompositionStrategy::Naive => "naive".into(),
        CompositionStrategy::Advanced { delta_slack } => format!("advanced (slack {delta_slack})"),
    }
}

pub fn compare(cfg: &SimConfig, branchings: &[u64], trials: usize, input: Option<&Path>) -> anyhow::Result<()> {
    let seed = cfg.seed()?;
    let c = cfg.constraint()?;
    let r = &cfg.release;
    let swcr = r.swcr()?;
    let log = match input {
        Some(p) => Changelog::read_jsonl(open(p)?)?,
        None => Changelog::default(),
    };
    check_constraint(&log, c)?;
    let sens = r.query.sensitivity();
    let direct = NoiseSpec::laplace(r.epsilon, sens, seed).map_err(|e| field("release", e))?;

    let mut w: Box<dyn Write> = match &cfg.output.path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(
        w,
        "c,h,delta_t,lhs,rhs,hdcr_wins,epsilon_prime_factor,total_epsilon,var_direct,var_derived,theory_direct,theory_derived"
    )?;
    let windows = swcr.count as f64;
    let mean_var = |derived: Option<(u64, NoiseSpec)>, salt: u64| -> anyhow::Result<f64> {
        let est = monte_carlo_vector(trials, seed ^ salt, |s| {
            let out = match derived {
                Some((b, node)) => derive_swcr_from_hdcr(&log, &swcr, b, &r.query, &node.with_seed(s)),
                None => run_swcr(&log, &swcr, &r.query, &direct.with_seed(s)),
            };
            DVector::from_vec(out.expect("validated parameters").noisy())
        })?;
        Ok(est.covariance.diagonal().sum() / windows)
    };
    let var_direct = mean_var(None, 0)?;
    for &b in branchings {
        let cmp = compare_hdcr_swcr(&swcr, b, c)?;
        let node = NoiseSpec::laplace(r.epsilon * cmp.epsilon_prime_factor, sens, seed)?;
        let per = PrivacyLoss::pure(r.epsilon)?;
        let total = swcr_bound(&swcr, per, c, &CompositionStrategy::Naive)?;
        let hier = swcr_hierarchy(&swcr, b)?;
        let hier_total = hdcr_bound(&hier, PrivacyLoss::pure(node.epsilon)?, c, &CompositionStrategy::Naive)?;
        let var_derived = mean_var(Some((b, node)), b)?;
        let reference = derive_swcr_from_hdcr(&log, &swcr, b, &r.query, &node)?;
        let theory_derived = reference.records.iter().map(|q| q.variance).sum::<f64>() / windows;
        writeln!(
            w,
            "{b},{},{},{},{},{},{},{},{},{},{},{}",
            cmp.height,
            cmp.delta_t,
            cmp.lhs,
            cmp.rhs,
            cmp.hdcr_wins,
            cmp.epsilon_prime_factor,
            total.epsilon(),
            var_direct,
            var_derived,
            direct.variance(),
            theory_derived
        )?;
        if (total.epsilon() - hier_total.epsilon()).abs() > 1e-9 * total.epsilon() {
            eprintln!(
                "note: c={b} totals differ under {c}: direct {} vs hierarchy {}",
                total.epsilon(),
                hier_total.epsilon()
            );
        }
    }
    w.flush()?;
    Ok(())
}

pub fn verify(trials: usize, seed: u64, inject_cover_fault: bool) -> anyhow::Result<()> {
    let reports = run_suite(&SuiteOptions {
        trials,
        seed,
        inject_cover_fault,
    })?;
    let mut out = io::stdout().lock();
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    writeln!(out, "{} checks, {failed} failed", reports.len())?;
    if failed > 0 {
        return Err(CliError::Verification(format!("{failed} of {} oracle checks failed", reports.len())).into());
    }
    Ok(())
}
