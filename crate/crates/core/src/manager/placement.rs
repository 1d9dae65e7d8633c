use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::pilot::AffinityLabels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityMode {
    /// Units carrying a label are only placed on pilots matching it.
    Hard,
    /// Label matches are preferred but never required.
    #[default]
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementReason {
    AffinityMatch,
    LeastUtilized,
    OnlyCandidate,
}

impl fmt::Display for PlacementReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementReason::AffinityMatch => "AFFINITY_MATCH",
            PlacementReason::LeastUtilized => "LEAST_UTILIZED",
            PlacementReason::OnlyCandidate => "ONLY_CANDIDATE",
        })
    }
}

/// Registry snapshot of one RUNNING pilot as seen by placement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotView {
    pub id: String,
    pub labels: AffinityLabels,
    pub capacity: u32,
    pub in_use: u32,
}

impl PilotView {
    pub fn utilization(&self) -> f64 {
        if self.capacity == 0 {
            1.0
        } else {
            self.in_use as f64 / self.capacity as f64
        }
    }

    /// Exact comparison of `in_use / capacity` without rounding.
    fn cmp_utilization(&self, other: &PilotView) -> Ordering {
        (self.in_use as u64 * other.capacity as u64).cmp(&(other.in_use as u64 * self.capacity as u64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementDecision {
    pub unit_id: String,
    pub pilot_id: String,
    pub locality_score: u8,
    pub utilization_at_decision: f64,
    pub reason: PlacementReason,
}

/// Whether `pilot` may host a unit with `labels` at all under `mode`.
pub fn admissible(labels: &AffinityLabels, pilot: &AffinityLabels, mode: AffinityMode) -> bool {
    match mode {
        AffinityMode::Soft => true,
        AffinityMode::Hard => {
            let score = labels.locality_score(pilot);
            if labels.machine.is_some() {
                score == 2
            } else if labels.datacenter.is_some() {
                score >= 1
            } else {
                true
            }
        }
    }
}

/// Choose a pilot for a unit needing `cores` with affinity `labels`.
///
/// Candidates are pilots with room for the unit (and, in hard mode, a
/// matching label). They are ranked by locality score descending, then
/// utilization ascending, then pilot id ascending. Returns `None` when no
/// pilot qualifies.
pub fn schedule(
    unit_id: &str,
    cores: u32,
    labels: &AffinityLabels,
    pilots: &[PilotView],
    mode: AffinityMode,
) -> Option<PlacementDecision> {
    let candidates: Vec<(&PilotView, u8)> = pilots
        .iter()
        .filter(|p| p.in_use as u64 + cores as u64 <= p.capacity as u64)
        .filter(|p| admissible(labels, &p.labels, mode))
        .map(|p| (p, labels.locality_score(&p.labels)))
        .collect();
    let &(best, score) = candidates.iter().min_by(|(a, sa), (b, sb)| {
        sb.cmp(sa)
            .then_with(|| a.cmp_utilization(b))
            .then_with(|| a.id.cmp(&b.id))
    })?;
    let reason = if score > 0 {
        PlacementReason::AffinityMatch
    } else if candidates.len() == 1 {
        PlacementReason::OnlyCandidate
    } else {
        PlacementReason::LeastUtilized
    };
    Some(PlacementDecision {
        unit_id: unit_id.to_owned(),
        pilot_id: best.id.clone(),
        locality_score: score,
        utilization_at_decision: best.utilization(),
        reason,
    })
}
