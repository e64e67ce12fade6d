use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{DeviceId, ProjectId};

use super::{ActivityEvent, EventKind};

/// How often models were retrained, per team (project) and per device.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainStats {
    pub per_team_total: BTreeMap<ProjectId, u64>,
    pub per_device_totals: BTreeMap<DeviceId, u64>,
    /// Mean of the team totals.
    pub mean: f64,
    /// Sample standard deviation of the team totals (0 with fewer than two).
    pub sd: f64,
    pub min: u64,
    pub max: u64,
    /// Mean of the per-device totals.
    pub device_mean: f64,
}

pub fn retrain_stats<'a>(events: impl IntoIterator<Item = &'a ActivityEvent>) -> RetrainStats {
    let mut stats = RetrainStats::default();
    for e in events {
        if let EventKind::ModelTrained { .. } = e.kind {
            *stats.per_team_total.entry(e.project).or_default() += 1;
            *stats.per_device_totals.entry(e.device).or_default() += 1;
        }
    }
    let teams: Vec<f64> = stats.per_team_total.values().map(|&v| v as f64).collect();
    stats.mean = mean(&teams);
    stats.sd = sample_sd(&teams);
    stats.min = stats.per_team_total.values().copied().min().unwrap_or(0);
    stats.max = stats.per_team_total.values().copied().max().unwrap_or(0);
    let devices: Vec<f64> = stats.per_device_totals.values().map(|&v| v as f64).collect();
    stats.device_mean = mean(&devices);
    stats
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EventId;

    fn trained(project: u128, device: u128, n: u64) -> ActivityEvent {
        ActivityEvent {
            event_id: EventId::from_u128(n as u128 + 1),
            project: ProjectId::from_u128(project),
            device: DeviceId::from_u128(device),
            ts: n,
            kind: EventKind::ModelTrained {
                version: n,
                per_label_test_correct: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn empty_log_is_zeros() {
        assert_eq!(retrain_stats(&[]), RetrainStats::default());
    }

    #[test]
    fn single_device_count() {
        let events: Vec<_> = (0..13).map(|i| trained(1, 7, i)).collect();
        let s = retrain_stats(&events);
        assert_eq!(s.per_device_totals[&DeviceId::from_u128(7)], 13);
        assert_eq!(s.device_mean, 13.0);
    }

    #[test]
    fn six_teams() {
        let totals = [17u64, 27, 35, 45, 61, 75];
        let mut events = Vec::new();
        for (team, &n) in totals.iter().enumerate() {
            for i in 0..n {
                events.push(trained(team as u128 + 1, team as u128 * 10 + i as u128 % 3, i));
            }
        }
        let s = retrain_stats(&events);
        // 260 / 6
        assert!((s.mean - 43.333_333_333_333_336).abs() < 1e-12);
        assert_eq!(format!("{:.1}", s.mean), "43.3");
        assert_eq!((s.min, s.max), (17, 75));
        // Sum of squared deviations is 2347.333...; sample sd = sqrt(that / 5).
        assert!((s.sd - 21.667_179_481_110_747).abs() < 1e-9);
    }
}
