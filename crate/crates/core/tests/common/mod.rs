#![allow(dead_code)]

use std::path::Path;

use afusion_core::datapipe::{preprocess_trial, TrialRecord};
use afusion_core::synth::{generate, SynthSpec, SynthSummary};
use afusion_core::train::{Scheduler, SchedulerConfig};

/// One epoch of a schedule: learning-rate decade below 1e-5 (0..=3), groups
/// unfrozen, and whether the run stops after this epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub epoch: u32,
    pub decade: u32,
    pub groups: u8,
    pub stop: bool,
}

/// Hand simulation of the schedule with five warmup epochs, patience 5,
/// three decades down to the floor, three groups, early stop at 20 stale
/// epochs once the groups are used up, and at most 100 epochs.
pub fn scheduler_oracle(vals: &[f64]) -> Vec<TraceRow> {
    let (mut best, mut stale, mut decade, mut groups) = (f64::NEG_INFINITY, 0, 0, 1u8);
    let (mut warm, mut exhausted, mut early) = (5, false, 0);
    let mut rows = Vec::new();
    for (e, &v) in vals.iter().enumerate() {
        let better = v > best;
        if better {
            best = v;
            stale = 0;
            early = 0;
        }
        if warm > 0 {
            warm -= 1;
        } else {
            stale += u32::from(!better);
            if exhausted {
                early += u32::from(!better);
            } else if decade == 3 && stale >= 5 {
                if groups < 3 {
                    groups += 1;
                    decade = 0;
                    stale = 0;
                    warm = 1;
                } else {
                    exhausted = true;
                }
            } else if stale > 5 {
                decade += 1;
                stale = 0;
            }
        }
        let stop = early >= 20 || e + 1 >= 100;
        rows.push(TraceRow {
            epoch: e as u32,
            decade,
            groups,
            stop,
        });
        if stop {
            break;
        }
    }
    rows
}

/// Runs the library scheduler over `vals` until it stops, in the same form.
pub fn scheduler_trace(vals: &[f64]) -> Vec<TraceRow> {
    let mut s = Scheduler::new(SchedulerConfig::default()).unwrap();
    let mut rows = Vec::new();
    for &v in vals {
        let out = s.tick(v).unwrap();
        let decade = (1e-5 / s.lr).log10().round() as u32;
        assert!(
            (s.lr - 1e-5 / 10f64.powi(decade as i32)).abs() <= 1e-12 * s.lr,
            "lr {}",
            s.lr
        );
        rows.push(TraceRow {
            epoch: s.epoch - 1,
            decade,
            groups: s.current_group,
            stop: out.stop,
        });
        if out.stop {
            break;
        }
    }
    rows
}

pub fn rising() -> Vec<f64> {
    (0..120).map(|e| 0.01 * (e + 1) as f64).collect()
}

/// Climbs to 0.3 at epoch 5 and stays there.
pub fn flat() -> Vec<f64> {
    (0..120).map(|e| 0.05 * (e.min(5) + 1) as f64).collect()
}

/// As `flat`, with a single jump to 0.5 at epoch 30.
pub fn plateau_then_jump() -> Vec<f64> {
    (0..120)
        .map(|e| if e >= 30 { 0.5 } else { 0.05 * (e.min(5) + 1) as f64 })
        .collect()
}

/// Epochs at which the decade grows, and (epoch, group) unfreeze events.
pub fn events(trace: &[TraceRow]) -> (Vec<u32>, Vec<(u32, u8)>) {
    let mut decays = Vec::new();
    let mut unfreezes = Vec::new();
    let (mut decade, mut groups) = (0, 1);
    for r in trace {
        if r.groups != groups {
            unfreezes.push((r.epoch, r.groups));
        } else if r.decade > decade {
            decays.push(r.epoch);
        }
        decade = r.decade;
        groups = r.groups;
    }
    (decays, unfreezes)
}

/// Generates a synthetic corpus under `dir` and preprocesses every trial.
pub fn synth_records(spec: &SynthSpec, dir: &Path) -> (SynthSummary, Vec<TrialRecord>) {
    let summary = generate(spec, dir).unwrap();
    let records = summary.entries.iter().map(|e| preprocess_trial(e).unwrap()).collect();
    (summary, records)
}

/// Records of `ids`, in that order.
pub fn pick(records: &[TrialRecord], ids: &[String]) -> Vec<TrialRecord> {
    ids.iter()
        .map(|id| records.iter().find(|r| &r.trial_id == id).unwrap().clone())
        .collect()
}

/// Concordance from pairwise differences: `cov = sum_ij (xi-xj)(yi-yj) / 2n^2`,
/// variances likewise, means by plain summation.
pub fn pairwise_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    let k = 2.0 * n * n;
    let gap = x.iter().sum::<f64>() / n - y.iter().sum::<f64>() / n;
    let den = sxx / k + syy / k + gap * gap;
    if den == 0.0 {
        0.0
    } else {
        2.0 * (sxy / k) / den
    }
}
