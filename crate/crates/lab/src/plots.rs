//! Step-indexed CSV exports of a run's metrics log.
//!
//! `ua_curve.csv`      step,stage,kimg,ua,override_rate
//! `frechet_curve.csv` step,stage,kimg,frechet_c0..frechet_c{K-1},frechet_remaining_mean
//! `loss_curves.csv`   step,stage,kimg,psi,psi_remaining,psi_forget,theta,theta_distill,theta_forget
//! `comparison.csv`    step,ua_<a>,ua_<b>,frechet_<a>,frechet_<b>  (outer join on step)
//!
//! One row per metrics record; values not computed at a record are empty.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_at, Result};
use crate::run::{read_metrics, MetricsRecord};

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn remaining_mean(r: &MetricsRecord, remaining: &[usize]) -> Option<f64> {
    let f = r.frechet.as_ref()?;
    let vals: Option<Vec<f64>> = remaining.iter().map(|&c| f.get(c).copied().flatten()).collect();
    let vals = vals?;
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn ua_curve(records: &[MetricsRecord]) -> String {
    let mut s = String::from("step,stage,kimg,ua,override_rate\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.stage, r.kimg, cell(r.ua), cell(r.override_rate));
    }
    s
}

pub fn frechet_curve(records: &[MetricsRecord], num_classes: usize, remaining: &[usize]) -> String {
    let mut s = String::from("step,stage,kimg");
    for c in 0..num_classes {
        let _ = write!(s, ",frechet_c{c}");
    }
    s.push_str(",frechet_remaining_mean\n");
    for r in records {
        let _ = write!(s, "{},{},{}", r.step, r.stage, r.kimg);
        for c in 0..num_classes {
            let v = r.frechet.as_ref().and_then(|f| f.get(c).copied().flatten());
            let _ = write!(s, ",{}", cell(v));
        }
        let _ = writeln!(s, ",{}", cell(remaining_mean(r, remaining)));
    }
    s
}

pub fn loss_curves(records: &[MetricsRecord]) -> String {
    let mut s = String::from("step,stage,kimg,psi,psi_remaining,psi_forget,theta,theta_distill,theta_forget\n");
    for r in records {
        let l = r.losses;
        let f = |g: fn(&sfd_core::trainer::StepLosses) -> f64| cell(l.as_ref().map(g));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.stage,
            r.kimg,
            f(|l| l.psi),
            f(|l| l.psi_remaining),
            f(|l| l.psi_forget),
            f(|l| l.theta),
            f(|l| l.theta_distill),
            f(|l| l.theta_forget)
        );
    }
    s
}

pub fn comparison(
    (name_a, a): (&str, &[MetricsRecord]),
    (name_b, b): (&str, &[MetricsRecord]),
    remaining: &[usize],
) -> String {
    let mut rows: BTreeMap<u64, [Option<f64>; 4]> = BTreeMap::new();
    for r in a {
        let e = rows.entry(r.step).or_default();
        e[0] = r.ua;
        e[2] = remaining_mean(r, remaining);
    }
    for r in b {
        let e = rows.entry(r.step).or_default();
        e[1] = r.ua;
        e[3] = remaining_mean(r, remaining);
    }
    let mut s = format!("step,ua_{name_a},ua_{name_b},frechet_{name_a},frechet_{name_b}\n");
    for (step, v) in rows {
        let _ = writeln!(s, "{step},{},{},{},{}", cell(v[0]), cell(v[1]), cell(v[2]), cell(v[3]));
    }
    s
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().replace(',', "_")).unwrap_or_else(|| "run".into())
}

/// Writes the per-run CSVs into `out` (and `comparison.csv` when `other` is
/// given). Returns the written paths.
pub fn export(run: &Path, other: Option<&Path>, out: &Path, num_classes: usize, remaining: &[usize]) -> Result<Vec<PathBuf>> {
    let records = read_metrics(run)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let mut files = vec![
        ("ua_curve.csv", ua_curve(&records)),
        ("frechet_curve.csv", frechet_curve(&records, num_classes, remaining)),
        ("loss_curves.csv", loss_curves(&records)),
    ];
    if let Some(o) = other {
        let other_records = read_metrics(o)?;
        let (mut la, lb) = (run_label(run), run_label(o));
        if la == lb {
            la.push_str("_a");
        }
        files.push(("comparison.csv", comparison((&la, &records), (&lb, &other_records), remaining)));
    }
    let mut written = Vec::new();
    for (name, text) in files {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_at(&p))?;
        written.push(p);
    }
    Ok(written)
}
