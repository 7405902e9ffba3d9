//! Corridor domain model: the three-link road, demand, incidents, and the
//! enumerable scenario space.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three links of the corridor, traversed uni-directionally U -> S -> D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Link {
    Upstream,
    Study,
    Downstream,
}

impl Link {
    pub const ALL: [Link; 3] = [Link::Upstream, Link::Study, Link::Downstream];

    pub fn index(self) -> usize {
        match self {
            Link::Upstream => 0,
            Link::Study => 1,
            Link::Downstream => 2,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Link::Upstream => "U",
            Link::Study => "S",
            Link::Downstream => "D",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkSpec {
    pub length_m: f64,
    pub free_flow_kmh: f64,
}

/// Three-link, three-lane road geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorridorSpec {
    pub links: [LinkSpec; 3],
    pub lanes_per_link: usize,
}

impl CorridorSpec {
    pub fn new(links: [LinkSpec; 3], lanes_per_link: usize) -> Result<Self> {
        for (i, l) in links.iter().enumerate() {
            if !(l.length_m > 0.0) {
                return Err(Error::InvalidCorridor(format!(
                    "link {i} length must be > 0, got {}",
                    l.length_m
                )));
            }
            if !(l.free_flow_kmh > 0.0) {
                return Err(Error::InvalidCorridor(format!(
                    "link {i} free-flow speed must be > 0, got {}",
                    l.free_flow_kmh
                )));
            }
        }
        if lanes_per_link != 3 {
            return Err(Error::InvalidCorridor(format!(
                "corridor has {lanes_per_link} lanes per link, expected 3"
            )));
        }
        Ok(CorridorSpec { links, lanes_per_link })
    }

    pub fn link(&self, link: Link) -> &LinkSpec {
        &self.links[link.index()]
    }

    pub fn total_length_m(&self) -> f64 {
        self.links.iter().map(|l| l.length_m).sum()
    }

    /// Global longitudinal coordinate where `link` begins.
    pub fn link_start_m(&self, link: Link) -> f64 {
        self.links[..link.index()].iter().map(|l| l.length_m).sum()
    }
}

impl Default for CorridorSpec {
    fn default() -> Self {
        let link = LinkSpec { length_m: 1000.0, free_flow_kmh: 100.0 };
        CorridorSpec { links: [link; 3], lanes_per_link: 3 }
    }
}

/// Non-negative demand rates (veh/h) over origin x destination pairs.
/// Degenerate 1x1 for the single-source corridor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdMatrix {
    entries: Vec<Vec<f64>>,
}

impl OdMatrix {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.is_empty() || entries[0].is_empty() {
            return Err(Error::InvalidOd("matrix must be non-empty".into()));
        }
        let cols = entries[0].len();
        for row in &entries {
            if row.len() != cols {
                return Err(Error::InvalidOd("ragged rows".into()));
            }
            for &v in row {
                if !(v >= 0.0) {
                    return Err(Error::InvalidOd(format!("negative or NaN rate {v}")));
                }
            }
        }
        Ok(OdMatrix { entries })
    }

    pub fn single_source(rate_veh_per_hour: f64) -> Result<Self> {
        OdMatrix::new(vec![vec![rate_veh_per_hour]])
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Total demand rate in veh/h.
    pub fn total(&self) -> f64 {
        self.entries.iter().flatten().sum()
    }
}

/// Demand level with its OD scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DemandLevel {
    Low,
    Medium,
    High,
}

impl DemandLevel {
    pub const ALL: [DemandLevel; 3] = [DemandLevel::Low, DemandLevel::Medium, DemandLevel::High];

    pub fn scale(self) -> f64 {
        match self {
            DemandLevel::Low => 0.7,
            DemandLevel::Medium => 1.0,
            DemandLevel::High => 1.3,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            DemandLevel::Low => "L",
            DemandLevel::Medium => "M",
            DemandLevel::High => "H",
        }
    }
}

impl std::str::FromStr for DemandLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "l" => Ok(DemandLevel::Low),
            "medium" | "m" => Ok(DemandLevel::Medium),
            "high" | "h" => Ok(DemandLevel::High),
            other => Err(Error::InvalidScenario(format!("unknown demand level {other:?}"))),
        }
    }
}

/// A lane of the three-lane carriageway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LanePos {
    Left,
    Middle,
    Right,
}

impl LanePos {
    pub const ALL: [LanePos; 3] = [LanePos::Left, LanePos::Middle, LanePos::Right];

    pub fn index(self) -> usize {
        match self {
            LanePos::Left => 0,
            LanePos::Middle => 1,
            LanePos::Right => 2,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LanePos::Left => "L",
            LanePos::Middle => "M",
            LanePos::Right => "R",
        }
    }
}

/// Longitudinal position of the road blocks on the study link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockPosition {
    Start,
    Center,
    End,
}

impl BlockPosition {
    pub const ALL: [BlockPosition; 3] = [BlockPosition::Start, BlockPosition::Center, BlockPosition::End];

    /// Fraction of the study-link length at which the block sits.
    pub fn offset_fraction(self) -> f64 {
        match self {
            BlockPosition::Start => 0.1,
            BlockPosition::Center => 0.5,
            BlockPosition::End => 0.9,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            BlockPosition::Start => "S",
            BlockPosition::Center => "C",
            BlockPosition::End => "E",
        }
    }
}

/// Longitudinal spacing between two blocks in the same lane.
pub const SAME_LANE_SPACING_M: f64 = 10.0;

/// One incident scenario: demand level x block position x blocked lanes,
/// plus the incident window in clock minutes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IncidentScenario {
    pub demand: DemandLevel,
    pub position: BlockPosition,
    /// 1 or 2 entries. Two equal lanes mean blocks spaced 10 m apart in that
    /// lane; two distinct lanes mean side-by-side blocks.
    pub blocks: Vec<LanePos>,
    pub start_min: u32,
    pub end_min: u32,
}

impl IncidentScenario {
    pub fn new(
        demand: DemandLevel,
        position: BlockPosition,
        blocks: Vec<LanePos>,
        start_min: u32,
        end_min: u32,
    ) -> Result<Self> {
        if blocks.is_empty() || blocks.len() > 2 {
            return Err(Error::InvalidScenario(format!(
                "{} blocks, expected 1 or 2",
                blocks.len()
            )));
        }
        if start_min >= end_min {
            return Err(Error::InvalidScenario(format!(
                "start minute {start_min} must precede end minute {end_min}"
            )));
        }
        Ok(IncidentScenario { demand, position, blocks, start_min, end_min })
    }

    /// Canonical identifier, e.g. "H-C-LR" for high demand, center, lanes
    /// Left and Right, or "M-S-M" for a single middle-lane block.
    pub fn id(&self) -> String {
        let lanes: String = self.blocks.iter().map(|l| l.short_name()).collect();
        format!("{}-{}-{}", self.demand.short_name(), self.position.short_name(), lanes)
    }
}

impl fmt::Display for IncidentScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Distress signal as conveyed by an in-vehicle monitoring system.
/// The precise position on the link is never observed; the blocked lanes are
/// observed only in high-precision (known-lanes) mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistressSignal {
    pub link: Link,
    pub time_min: u32,
    pub n_blocks: usize,
    pub lanes: Option<Vec<LanePos>>,
}

impl DistressSignal {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > 2 {
            return Err(Error::InvalidBlockCount(self.n_blocks));
        }
        if let Some(lanes) = &self.lanes {
            if lanes.len() != self.n_blocks {
                return Err(Error::InvalidScenario(format!(
                    "signal lists {} lanes but reports {} blocks",
                    lanes.len(),
                    self.n_blocks
                )));
            }
        }
        Ok(())
    }
}

/// All distinct lane configurations, in canonical order: the three single
/// blocks, the three same-lane pairs, then the three distinct-lane pairs.
pub fn lane_configurations() -> Vec<Vec<LanePos>> {
    let mut configs = Vec::with_capacity(9);
    for lane in LanePos::ALL {
        configs.push(vec![lane]);
    }
    for lane in LanePos::ALL {
        configs.push(vec![lane, lane]);
    }
    for (i, &a) in LanePos::ALL.iter().enumerate() {
        for &b in &LanePos::ALL[i + 1..] {
            configs.push(vec![a, b]);
        }
    }
    configs
}

/// The 81 distinct incident scenarios: 3 demand x 3 position x 9 lane
/// configurations, in canonical order (demand outermost).
pub fn enumerate_scenarios(incident_window: (u32, u32)) -> Vec<IncidentScenario> {
    let (start, end) = incident_window;
    let mut out = Vec::with_capacity(81);
    for demand in DemandLevel::ALL {
        for position in BlockPosition::ALL {
            for blocks in lane_configurations() {
                out.push(IncidentScenario { demand, position, blocks, start_min: start, end_min: end });
            }
        }
    }
    out
}

/// The what-if scenario templates consistent with a distress signal: all
/// demand levels and positions are unobserved, and the lane configuration is
/// either the signalled one (known-lanes mode) or every configuration with a
/// matching block count.
pub fn consistent_scenarios(
    sig: &DistressSignal,
    known_lanes: bool,
    incident_window: (u32, u32),
) -> Result<Vec<IncidentScenario>> {
    sig.validate()?;
    let configs: Vec<Vec<LanePos>> = if known_lanes {
        let lanes = sig.lanes.clone().ok_or_else(|| {
            Error::InvalidScenario("known-lanes mode requires lanes in the signal".into())
        })?;
        vec![lanes]
    } else {
        lane_configurations()
            .into_iter()
            .filter(|c| c.len() == sig.n_blocks)
            .collect()
    };
    let (start, end) = incident_window;
    let mut out = Vec::new();
    for demand in DemandLevel::ALL {
        for position in BlockPosition::ALL {
            for blocks in &configs {
                out.push(IncidentScenario {
                    demand,
                    position,
                    blocks: blocks.clone(),
                    start_min: start,
                    end_min: end,
                });
            }
        }
    }
    Ok(out)
}

/// Perturbed and scaled OD matrix: each entry is max(0, c_hat * c_tilde * A_ij)
/// with c_tilde ~ N(1, 0.2) drawn per entry from `seed`.
pub fn perturb_od(a: &OdMatrix, demand: DemandLevel, seed: u64) -> OdMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(1.0, 0.2).expect("valid normal");
    let c_hat = demand.scale();
    let entries = a
        .entries
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| apply_perturbation(v, c_hat, noise.sample(&mut rng)))
                .collect()
        })
        .collect();
    OdMatrix { entries }
}

/// The perturbation law for one entry. Negative draws are clipped to zero.
pub fn apply_perturbation(rate: f64, c_hat: f64, c_tilde: f64) -> f64 {
    (c_hat * c_tilde * rate).max(0.0)
}

/// Minute index of a "HH:MM" clock string.
pub fn parse_clock(s: &str) -> Result<u32> {
    let (h, m) = s.split_once(':').ok_or_else(|| Error::InvalidClock(s.into()))?;
    let h: u32 = h.trim().parse().map_err(|_| Error::InvalidClock(s.into()))?;
    let m: u32 = m.trim().parse().map_err(|_| Error::InvalidClock(s.into()))?;
    if h > 23 || m > 59 {
        return Err(Error::InvalidClock(s.into()));
    }
    Ok(h * 60 + m)
}

pub fn format_clock(minute: u32) -> String {
    format!("{:02}:{:02}", minute / 60, minute % 60)
}

/// On-disk corridor and scenario definition (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorridorConfig {
    pub links: Vec<LinkConfig>,
    pub lanes_per_link: usize,
    /// Baseline (medium) demand at the single upstream source, veh/h.
    pub demand_veh_per_hour: f64,
    /// Incident window as "HH:MM" clock strings.
    pub incident_start: String,
    pub incident_end: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkConfig {
    pub name: String,
    pub length_m: f64,
    pub free_flow_kmh: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        let link = |name: &str| LinkConfig {
            name: name.into(),
            length_m: 1000.0,
            free_flow_kmh: 100.0,
        };
        CorridorConfig {
            links: vec![link("U"), link("S"), link("D")],
            lanes_per_link: 3,
            demand_veh_per_hour: 3171.0,
            incident_start: "07:10".into(),
            incident_end: "07:40".into(),
        }
    }
}

impl CorridorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn corridor(&self) -> Result<CorridorSpec> {
        if self.links.len() != 3 {
            return Err(Error::InvalidCorridor(format!(
                "config lists {} links, expected 3 (U, S, D)",
                self.links.len()
            )));
        }
        let to_spec = |l: &LinkConfig| LinkSpec { length_m: l.length_m, free_flow_kmh: l.free_flow_kmh };
        CorridorSpec::new(
            [to_spec(&self.links[0]), to_spec(&self.links[1]), to_spec(&self.links[2])],
            self.lanes_per_link,
        )
    }

    pub fn base_od(&self) -> Result<OdMatrix> {
        OdMatrix::single_source(self.demand_veh_per_hour)
    }

    pub fn incident_window(&self) -> Result<(u32, u32)> {
        let start = parse_clock(&self.incident_start)?;
        let end = parse_clock(&self.incident_end)?;
        if start >= end {
            return Err(Error::InvalidScenario(format!(
                "incident window {} - {} is empty",
                self.incident_start, self.incident_end
            )));
        }
        Ok((start, end))
    }
}
