//! Baseline-vs-candidate comparison over the four report columns, with
//! percentage deltas recomputed from the emitted absolute values.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::runner::{RunArtifacts, RunError, RunSummary};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareRow {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    /// Percentage change from baseline; absent when the baseline is zero
    /// and the candidate is not.
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareReport {
    pub plant: String,
    pub rows: Vec<CompareRow>,
}

/// Render an absolute column value; deltas are recomputed from exactly
/// these rendered digits so the emitted table is self-consistent.
fn render(value: f64) -> f64 {
    format!("{value:.12e}").parse().expect("rendered float parses")
}

fn delta_pct(baseline: f64, candidate: f64) -> Option<f64> {
    if baseline == 0.0 {
        if candidate == 0.0 {
            Some(0.0)
        } else {
            None
        }
    } else {
        Some((candidate - baseline) / baseline.abs() * 100.0)
    }
}

/// Compare two run summaries row by row. Both runs must come from the
/// same plant under the same testing protocol.
pub fn compare_report(
    baseline: &RunSummary,
    candidate: &RunSummary,
) -> Result<CompareReport, RunError> {
    if baseline.plant != candidate.plant {
        return Err(RunError::ProtocolMismatch(format!(
            "plants differ: {} vs {}",
            baseline.plant, candidate.plant
        )));
    }
    if baseline.phase != candidate.phase
        || baseline.episodes != candidate.episodes
        || baseline.cycles_per_episode != candidate.cycles_per_episode
    {
        return Err(RunError::ProtocolMismatch(
            "runs use different phases or episode protocols".into(),
        ));
    }
    let metrics: [(&str, fn(&RunSummary) -> f64); 4] = [
        ("demand_l_per_s", |s| s.demand_l_per_s),
        ("power_kw_per_s", |s| s.power_kw_per_s),
        ("overflow_l_per_s", |s| s.overflow_l_per_s),
        ("potential", |s| s.potential),
    ];
    let rows = metrics
        .iter()
        .map(|(name, get)| {
            let b = render(get(baseline));
            let c = render(get(candidate));
            CompareRow {
                metric: name.to_string(),
                baseline: b,
                candidate: c,
                delta_pct: delta_pct(b, c),
            }
        })
        .collect();
    Ok(CompareReport { plant: baseline.plant.clone(), rows })
}

/// Compare two run directories by their report files.
pub fn compare_run_dirs(baseline: &Path, candidate: &Path) -> Result<CompareReport, RunError> {
    let b = RunArtifacts::load_summary(baseline)?;
    let c = RunArtifacts::load_summary(candidate)?;
    compare_report(&b, &c)
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,baseline,candidate,delta_pct\n");
        for row in &self.rows {
            let delta = row.delta_pct.map(|d| format!("{d:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.12e},{:.12e},{delta}",
                row.metric, row.baseline, row.candidate
            );
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = format!("plant: {}\n", self.plant);
        let _ = writeln!(out, "{:<22} {:>16} {:>16} {:>12}", "metric", "baseline", "candidate", "delta");
        for row in &self.rows {
            let delta = row
                .delta_pct
                .map(|d| format!("{d:+.2}%"))
                .unwrap_or_else(|| "n/a".to_string());
            let _ = writeln!(
                out,
                "{:<22} {:>16.6} {:>16.6} {:>12}",
                row.metric, row.baseline, row.candidate, delta
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::Phase;
    use modsbsg_core::game::GameMode;

    fn summary(power: f64, overflow: f64, potential: f64) -> RunSummary {
        RunSummary {
            plant: "bglp".into(),
            mode: GameMode::VanillaSbPG,
            leaders: vec![],
            phase: Phase::Test,
            episodes: 50,
            cycles_per_episode: 1000,
            seed: 0,
            demand_l_per_s: 0.0,
            power_kw_per_s: power,
            overflow_l_per_s: overflow,
            potential,
        }
    }

    #[test]
    fn identical_runs_have_zero_deltas() {
        let s = summary(0.6, 0.0, 3.3);
        let report = compare_report(&s, &s).unwrap();
        for row in &report.rows {
            assert_eq!(row.delta_pct, Some(0.0));
        }
    }

    #[test]
    fn overflow_reduction_percentage() {
        let base = summary(1.0, 0.147357, 21.0);
        let cand = summary(1.0, 0.003355, 25.4);
        let report = compare_report(&base, &cand).unwrap();
        let overflow = report.rows.iter().find(|r| r.metric == "overflow_l_per_s").unwrap();
        let delta = overflow.delta_pct.unwrap();
        // (0.003355 - 0.147357) / 0.147357 = -97.72%
        assert!((delta + 97.7232).abs() < 0.01, "{delta}");
    }

    #[test]
    fn power_reduction_percentage() {
        let base = summary(0.602403, 0.0, 3.3);
        let cand = summary(0.536387, 0.0, 4.5);
        let report = compare_report(&base, &cand).unwrap();
        let power = report.rows.iter().find(|r| r.metric == "power_kw_per_s").unwrap();
        let delta = power.delta_pct.unwrap();
        assert!((delta + 10.96).abs() < 0.01, "{delta}");
    }

    #[test]
    fn deltas_recompute_from_emitted_absolutes() {
        let base = summary(0.612345678901234, 0.000123456789, 3.3333333333);
        let cand = summary(0.536387654321098, 0.000012345678, 4.4444444444);
        let report = compare_report(&base, &cand).unwrap();
        for row in &report.rows {
            if let Some(delta) = row.delta_pct {
                if row.baseline != 0.0 {
                    let recomputed =
                        (row.candidate - row.baseline) / row.baseline.abs() * 100.0;
                    assert!((recomputed - delta).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn protocol_mismatch_is_rejected() {
        let a = summary(1.0, 0.0, 3.0);
        let mut b = summary(1.0, 0.0, 3.0);
        b.plant = "lsbglp_sequential".into();
        assert!(matches!(compare_report(&a, &b), Err(RunError::ProtocolMismatch(_))));
        let mut c = summary(1.0, 0.0, 3.0);
        c.episodes = 10;
        assert!(matches!(compare_report(&a, &c), Err(RunError::ProtocolMismatch(_))));
    }
}
