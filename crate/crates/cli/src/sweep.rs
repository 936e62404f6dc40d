//! Parameter sweeps: one seeded train+test pair per axis value, with a
//! ranked summary by test-phase potential.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use modsbsg_core::learning::SchedulerSpec;

use crate::config::ResolvedExperiment;
use crate::runner::{train_then_test, RunError, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    LeaderSet,
    Scheduler,
    FocusWeights,
}

/// Values for one sweep axis.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum SweepValues {
    LeaderSets(Vec<Vec<usize>>),
    Schedulers(Vec<SchedulerSpec>),
    /// (leader focus, follower focus) percentage pairs.
    Focus(Vec<([f64; 2], [f64; 2])>),
}

impl SweepValues {
    pub fn len(&self) -> usize {
        match self {
            SweepValues::LeaderSets(v) => v.len(),
            SweepValues::Schedulers(v) => v.len(),
            SweepValues::Focus(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Default value grids for each axis (zero-based player indices).
pub fn default_values(axis: SweepAxis) -> SweepValues {
    match axis {
        SweepAxis::LeaderSet => {
            SweepValues::LeaderSets(vec![vec![3], vec![2, 3], vec![1, 2, 3]])
        }
        SweepAxis::Scheduler => SweepValues::Schedulers(vec![
            SchedulerSpec::Static { steps: 75 },
            SchedulerSpec::GradualReduction { theta0: 100.0, decay: 0.999975 },
            SchedulerSpec::GradThreshold { theta0: 0.5, decay: 0.99995, max_steps: 100 },
        ]),
        SweepAxis::FocusWeights => SweepValues::Focus(vec![
            ([90.0, 10.0], [50.0, 50.0]),
            ([70.0, 30.0], [50.0, 50.0]),
            ([90.0, 10.0], [70.0, 30.0]),
            ([50.0, 50.0], [70.0, 30.0]),
            ([70.0, 30.0], [90.0, 10.0]),
            ([50.0, 50.0], [90.0, 10.0]),
        ]),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub label: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    /// Entries sorted by descending test potential.
    pub ranked: Vec<SweepEntry>,
}

fn apply_value(
    base: &ResolvedExperiment,
    axis: SweepAxis,
    values: &SweepValues,
    index: usize,
) -> Result<(ResolvedExperiment, String), RunError> {
    let mut config = base.config.clone();
    match (axis, values) {
        (SweepAxis::LeaderSet, SweepValues::LeaderSets(sets)) => {
            config.game.leaders = sets[index].clone();
            let resolved = crate::config::resolve(config)?;
            Ok((resolved, format!("leaders={:?}", sets[index])))
        }
        (SweepAxis::Scheduler, SweepValues::Schedulers(specs)) => {
            config.game.scheduler = specs[index];
            let resolved = crate::config::resolve(config)?;
            Ok((resolved, format!("scheduler={:?}", specs[index])))
        }
        (SweepAxis::FocusWeights, SweepValues::Focus(pairs)) => {
            let (leader, follower) = pairs[index];
            config.game.leader_focus = Some(leader);
            config.game.follower_focus = Some(follower);
            let resolved = crate::config::resolve(config)?;
            Ok((
                resolved,
                format!(
                    "focus leader {}/{} follower {}/{}",
                    leader[0], leader[1], follower[0], follower[1]
                ),
            ))
        }
        _ => Err(RunError::ProtocolMismatch("sweep values do not match the axis".into())),
    }
}

/// Run one seeded train+test pair per value and rank by test potential.
/// An empty value list yields an empty summary.
pub fn sweep(
    base: &ResolvedExperiment,
    axis: SweepAxis,
    values: &SweepValues,
    out_dir: &Path,
    write_cycle_csv: bool,
) -> Result<SweepOutcome, RunError> {
    fs::create_dir_all(out_dir)?;
    let mut ranked = Vec::new();
    for index in 0..values.len() {
        let (resolved, label) = apply_value(base, axis, values, index)?;
        let run_dir = out_dir.join(format!("value_{index:02}"));
        let (_, test) = train_then_test(&resolved, &run_dir, write_cycle_csv)?;
        ranked.push(SweepEntry { label, summary: test.summary });
    }
    ranked.sort_by(|a, b| {
        b.summary
            .potential
            .partial_cmp(&a.summary.potential)
            .expect("potentials are finite")
    });
    let outcome = SweepOutcome { axis, ranked };
    fs::write(out_dir.join("sweep_summary.csv"), outcome.to_csv())?;
    Ok(outcome)
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "rank,label,demand_l_per_s,power_kw_per_s,overflow_l_per_s,potential\n",
        );
        for (rank, entry) in self.ranked.iter().enumerate() {
            let s = &entry.summary;
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{}",
                rank + 1,
                entry.label,
                s.demand_l_per_s,
                s.power_kw_per_s,
                s.overflow_l_per_s,
                s.potential
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_value_grids() {
        assert_eq!(default_values(SweepAxis::LeaderSet).len(), 3);
        assert_eq!(default_values(SweepAxis::Scheduler).len(), 3);
        assert_eq!(default_values(SweepAxis::FocusWeights).len(), 6);
    }

    #[test]
    fn empty_values_yield_empty_summary() {
        let base = crate::config::parse_config(
            r#"{ "plant": "bglp", "game": { "mode": "mod_sbsg", "leaders": [2, 3] },
                 "episodes": { "train": 1, "cycles_per_episode": 5, "test": 1 } }"#,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("modsbsg_sweep_empty_test");
        let outcome = sweep(
            &base,
            SweepAxis::LeaderSet,
            &SweepValues::LeaderSets(vec![]),
            &dir,
            false,
        )
        .unwrap();
        assert!(outcome.ranked.is_empty());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
