//! Lagged-speed feature extraction and incident-phase bookkeeping.
//!
//! Each eligible minute t yields one supervised row: the 1-minute mean
//! speeds 5 and 6 minutes earlier on all three links predict the study-link
//! speed at t. Rows are partitioned by incident phase so the two-piece
//! incident model can be fitted on matching regimes.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corridor::{IncidentScenario, Link};
use crate::error::{Error, Result};
use crate::microsim::SpeedSeries;

/// Deepest lag used by any feature, minutes.
pub const LAG_DEPTH_MIN: u32 = 6;
/// Incident rows with elapsed time up to this belong to the early piece.
pub const EARLY_PHASE_MIN: u32 = 6;
/// Rows this close after clearance are dropped: their lag windows straddle
/// the incident and recovery regimes.
pub const POST_CLEARANCE_DROP_MIN: u32 = 6;

pub const SPEED_COLUMNS: [&str; 6] = ["S5", "S6", "U5", "U6", "D5", "D6"];
pub const T_ACCIDENT_COLUMN: &str = "T_accident";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Normal,
    IncidentEarly,
    IncidentLate,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::IncidentEarly => "incident_early",
            Phase::IncidentLate => "incident_late",
        }
    }
}

/// One row of predictors: lagged speeds, km/h, plus the optional elapsed
/// incident time in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub s5: f64,
    pub s6: f64,
    pub u5: f64,
    pub u6: f64,
    pub d5: f64,
    pub d6: f64,
    pub t_accident: Option<f64>,
}

impl FeatureVector {
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = vec![self.s5, self.s6, self.u5, self.u6, self.d5, self.d6];
        if let Some(t) = self.t_accident {
            row.push(t);
        }
        row
    }
}

/// A design matrix with aligned responses, all rows from one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub columns: Vec<String>,
    /// n rows of k predictor values each.
    pub x: Vec<Vec<f64>>,
    /// Study-link speed at the target minute, km/h.
    pub y: Vec<f64>,
    /// Clock minute of each row's target.
    pub minutes: Vec<u32>,
    pub phase: Phase,
}

impl RegressionDataset {
    pub fn empty(phase: Phase, with_t: bool) -> Self {
        let mut columns: Vec<String> = SPEED_COLUMNS.iter().map(|s| s.to_string()).collect();
        if with_t {
            columns.push(T_ACCIDENT_COLUMN.to_string());
        }
        RegressionDataset { columns, x: Vec::new(), y: Vec::new(), minutes: Vec::new(), phase }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn has_t_accident(&self) -> bool {
        self.columns.iter().any(|c| c == T_ACCIDENT_COLUMN)
    }

    fn push(&mut self, x: Vec<f64>, y: f64, minute: u32) {
        debug_assert_eq!(x.len(), self.k());
        self.x.push(x);
        self.y.push(y);
        self.minutes.push(minute);
    }

    /// Restricts the predictors to the named columns, in the given order.
    pub fn select_columns(&self, keep: &[&str]) -> Result<RegressionDataset> {
        let idx: Vec<usize> = keep
            .iter()
            .map(|name| {
                self.columns
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::DatasetMismatch(format!("no column named {name}")))
            })
            .collect::<Result<_>>()?;
        Ok(RegressionDataset {
            columns: keep.iter().map(|s| s.to_string()).collect(),
            x: self.x.iter().map(|row| idx.iter().map(|&i| row[i]).collect()).collect(),
            y: self.y.clone(),
            minutes: self.minutes.clone(),
            phase: self.phase,
        })
    }

    /// The study-link-only variant: drops the up- and downstream features.
    pub fn without_ud(&self) -> Result<RegressionDataset> {
        let mut keep = vec!["S5", "S6"];
        if self.has_t_accident() {
            keep.push(T_ACCIDENT_COLUMN);
        }
        self.select_columns(&keep)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io_err = |e: std::io::Error| Error::io("dataset.csv", e);
        writeln!(w, "{},S0,phase,minute", self.columns.join(",")).map_err(io_err)?;
        for i in 0..self.n() {
            let xs: Vec<String> = self.x[i].iter().map(|v| format!("{v:.4}")).collect();
            writeln!(
                w,
                "{},{:.4},{},{}",
                xs.join(","),
                self.y[i],
                self.phase.as_str(),
                self.minutes[i]
            )
            .map_err(io_err)?;
        }
        Ok(())
    }
}

/// Splits a speed series into per-phase regression datasets.
///
/// A minute t is eligible when both its 5- and 6-minute lags are recorded.
/// The onset minute itself counts as normal (the signal arrives during it);
/// the first incident row is onset+1. Rows in the first 6 minutes after
/// clearance are dropped entirely. `with_t` appends the elapsed incident
/// time (minutes since onset) to incident-phase rows only.
pub fn extract(
    series: &SpeedSeries,
    incident: Option<&IncidentScenario>,
    with_t: bool,
) -> Result<BTreeMap<Phase, RegressionDataset>> {
    if series.len_minutes() < LAG_DEPTH_MIN as usize + 1 {
        return Err(Error::SeriesTooShort {
            got: series.len_minutes(),
            need: LAG_DEPTH_MIN as usize + 1,
        });
    }
    let mut out: BTreeMap<Phase, RegressionDataset> = BTreeMap::new();
    for t in series.start_min + LAG_DEPTH_MIN..series.end_min() {
        let phase = match incident {
            None => Phase::Normal,
            Some(inc) => {
                let onset = inc.start_min;
                let clearance = inc.end_min;
                if t <= onset || t >= clearance + POST_CLEARANCE_DROP_MIN {
                    Phase::Normal
                } else if t <= onset + EARLY_PHASE_MIN {
                    Phase::IncidentEarly
                } else if t <= clearance {
                    Phase::IncidentLate
                } else {
                    continue; // post-clearance transition window
                }
            }
        };
        let incident_phase = phase != Phase::Normal;
        let t_accident = if with_t && incident_phase {
            Some((t - incident.expect("incident phase implies scenario").start_min) as f64)
        } else {
            None
        };
        let at = |link: Link, lag: u32| series.get(link, t - lag).expect("lag in range");
        let fv = FeatureVector {
            s5: at(Link::Study, 5),
            s6: at(Link::Study, 6),
            u5: at(Link::Upstream, 5),
            u6: at(Link::Upstream, 6),
            d5: at(Link::Downstream, 5),
            d6: at(Link::Downstream, 6),
            t_accident,
        };
        let y = series.get(Link::Study, t).expect("target in range");
        out.entry(phase)
            .or_insert_with(|| RegressionDataset::empty(phase, with_t && incident_phase))
            .push(fv.to_row(), y, t);
    }
    Ok(out)
}

/// Row-wise concatenation of same-shaped datasets, preserving order.
pub fn pool(datasets: &[RegressionDataset]) -> Result<RegressionDataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::DatasetMismatch("cannot pool zero datasets".into()))?;
    let mut out = first.clone();
    for d in &datasets[1..] {
        if d.columns != first.columns || d.phase != first.phase {
            return Err(Error::DatasetMismatch(format!(
                "cannot pool k={} phase={} with k={} phase={}",
                first.k(),
                first.phase.as_str(),
                d.k(),
                d.phase.as_str()
            )));
        }
        out.x.extend(d.x.iter().cloned());
        out.y.extend(d.y.iter().cloned());
        out.minutes.extend(d.minutes.iter().cloned());
    }
    Ok(out)
}
