//! Discrete-time car-following and lane-changing engine.
//!
//! Substitutes for a commercial microsimulator: vehicles follow an
//! Intelligent-Driver-Model-style acceleration law with an incentive/safety
//! lane-change rule, and each run yields 1-minute mean link speeds. A single
//! run is strictly single-threaded; parallelism exists only across
//! independent runs in [`run_batch`].

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corridor::{CorridorSpec, IncidentScenario, Link, OdMatrix, SAME_LANE_SPACING_M};
use crate::error::{Error, Result};

/// Per-run simulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Simulation time step, seconds. Must lie in (0, 1].
    pub dt_s: f64,
    /// First simulated clock minute (inclusive).
    pub horizon_start_min: u32,
    /// Last simulated clock minute (exclusive).
    pub horizon_end_min: u32,
    /// Leading minutes discarded from the recorded series. Must be at least
    /// the 6-minute lag depth of the feature extractor.
    pub warm_up_min: u32,
    pub seed: u64,
    /// IDM maximum acceleration, m/s^2.
    pub max_accel: f64,
    /// IDM comfortable deceleration, m/s^2.
    pub comfortable_decel: f64,
    /// IDM acceleration exponent. Higher values keep equilibrium spacing
    /// close to `min_gap + v * headway` up to the desired speed, so queue
    /// discharge flows near the desired speed instead of sagging.
    pub accel_exponent: f64,
    /// Minimum bumper-to-bumper gap, m. Doubles as the IDM jam distance and
    /// as the hard no-collision floor.
    pub min_gap_m: f64,
    /// IDM desired headway time, s.
    pub headway_time_s: f64,
    /// Desired speeds are drawn uniformly from this range, km/h.
    pub desired_speed_kmh: (f64, f64),
    /// MOBIL-style politeness factor.
    pub lc_politeness: f64,
    /// Acceleration advantage (m/s^2) required to change lanes.
    pub lc_threshold: f64,
    /// Maximum braking imposed on the new follower, m/s^2.
    pub lc_safe_decel: f64,
    /// Harder braking tolerated when merging out of a stalled lane, m/s^2.
    pub lc_forced_decel: f64,
    /// Seconds a vehicle must be stopped before it merges forcefully.
    pub lc_stuck_after_s: f64,
    /// Distance at which drivers start merging out of a blocked lane, m.
    pub lc_anticipation_m: f64,
    /// Length of the slow zone upstream of an active block, m. Vehicles in
    /// open lanes cap their speed while passing it (rubbernecking); 0
    /// disables the effect.
    pub rubberneck_len_m: f64,
    /// Speed cap inside the slow zone, km/h. High enough that the zone does
    /// not itself become a capacity bottleneck at a 1 s headway.
    pub rubberneck_speed_kmh: f64,
    /// Arrivals that cannot enter within this many seconds divert and are
    /// dropped, like demand rerouting around a spillback.
    pub entry_patience_s: f64,
    /// Minimum seconds between lane changes of one vehicle.
    pub lc_cooldown_s: f64,
    /// Vehicle length, m.
    pub vehicle_len_m: f64,
    /// Stationary obstacle length, m.
    pub obstacle_len_m: f64,
    /// Total OD rates above this are rejected as a capacity violation, veh/h.
    pub saturation_ceiling_veh_h: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_s: 0.5,
            // 6:38 - 8:00, first 6 minutes discarded: the series covers
            // 6:44 - 8:00 and lagged features exist from 6:50 onwards.
            horizon_start_min: 398,
            horizon_end_min: 480,
            warm_up_min: 6,
            seed: 0,
            max_accel: 2.0,
            comfortable_decel: 2.0,
            accel_exponent: 16.0,
            min_gap_m: 3.0,
            headway_time_s: 1.0,
            desired_speed_kmh: (80.0, 110.0),
            lc_politeness: 0.1,
            lc_threshold: 0.2,
            lc_safe_decel: 4.0,
            lc_forced_decel: 8.0,
            lc_stuck_after_s: 4.0,
            lc_anticipation_m: 2000.0,
            rubberneck_len_m: 250.0,
            rubberneck_speed_kmh: 55.0,
            entry_patience_s: 60.0,
            lc_cooldown_s: 4.0,
            vehicle_len_m: 4.5,
            obstacle_len_m: 5.0,
            saturation_ceiling_veh_h: 8000.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0 && self.dt_s <= 1.0) {
            return Err(Error::InvalidSimConfig(format!(
                "time step {} s outside (0, 1]",
                self.dt_s
            )));
        }
        if self.warm_up_min < 6 {
            return Err(Error::InvalidSimConfig(format!(
                "warm-up {} min is shorter than the 6-minute lag depth",
                self.warm_up_min
            )));
        }
        if self.horizon_start_min + self.warm_up_min >= self.horizon_end_min {
            return Err(Error::InvalidSimConfig("horizon shorter than warm-up".into()));
        }
        if self.max_accel <= 0.0 || self.comfortable_decel <= 0.0 || self.min_gap_m <= 0.0 {
            return Err(Error::InvalidSimConfig("car-following parameters must be positive".into()));
        }
        if self.rubberneck_len_m < 0.0
            || (self.rubberneck_len_m > 0.0 && self.rubberneck_speed_kmh <= 0.0)
        {
            return Err(Error::InvalidSimConfig(
                "slow-zone length must be non-negative and its speed cap positive".into(),
            ));
        }
        Ok(())
    }

    /// First recorded clock minute.
    pub fn record_start_min(&self) -> u32 {
        self.horizon_start_min + self.warm_up_min
    }
}

/// Per-link sequence of 1-minute mean speeds in km/h, indexed by clock minute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSeries {
    pub start_min: u32,
    /// One vector per link (U, S, D), equal lengths.
    pub speeds: [Vec<f64>; 3],
}

impl SpeedSeries {
    pub fn len_minutes(&self) -> usize {
        self.speeds[0].len()
    }

    pub fn end_min(&self) -> u32 {
        self.start_min + self.len_minutes() as u32
    }

    /// Mean speed on `link` during clock minute `minute`, if recorded.
    pub fn get(&self, link: Link, minute: u32) -> Option<f64> {
        if minute < self.start_min {
            return None;
        }
        self.speeds[link.index()].get((minute - self.start_min) as usize).copied()
    }

    /// Mean of the study-link speeds over `[from, to)` clock minutes.
    pub fn mean_study_speed(&self, from: u32, to: u32) -> f64 {
        let vals: Vec<f64> = (from..to).filter_map(|m| self.get(Link::Study, m)).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io_err = |e: std::io::Error| Error::io("speeds.csv", e);
        writeln!(w, "minute,clock,U,S,D").map_err(io_err)?;
        for i in 0..self.len_minutes() {
            let minute = self.start_min + i as u32;
            writeln!(
                w,
                "{},{},{:.4},{:.4},{:.4}",
                minute,
                crate::corridor::format_clock(minute),
                self.speeds[0][i],
                self.speeds[1][i],
                self.speeds[2][i]
            )
            .map_err(io_err)?;
        }
        Ok(())
    }
}

/// Bookkeeping counters for one run, used by the physics invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Vehicles actually placed on the road.
    pub injected: u64,
    /// Vehicles that left the corridor downstream.
    pub exited: u64,
    /// Vehicles still on the road when the horizon ended.
    pub on_road: u64,
    /// Smallest bumper-to-bumper gap observed at any step, m.
    pub min_gap_observed_m: f64,
    /// Steps on which any same-lane gap fell below the minimum gap.
    pub collision_steps: u64,
}

/// One vehicle (or stationary obstacle) in the simulation.
#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u32,
    pub lane: u8,
    /// Front-bumper position, m from the corridor entry.
    pub pos: f64,
    pub speed: f64,
    pub desired_speed: f64,
    pub len: f64,
    pub is_obstacle: bool,
    exited: bool,
    cooldown_steps: u32,
    stopped_s: f64,
}

/// One job for [`run_batch`].
#[derive(Debug, Clone)]
pub struct BatchJob {
    pub od: OdMatrix,
    pub incident: Option<IncidentScenario>,
    pub seed: u64,
}

pub fn run(
    corridor: &CorridorSpec,
    od: &OdMatrix,
    incident: Option<&IncidentScenario>,
    cfg: &SimConfig,
) -> Result<SpeedSeries> {
    Engine::new(corridor, od, incident, cfg)?.run(None).map(|(s, _)| s)
}

/// Like [`run`] but also returns the conservation/collision counters.
pub fn run_detailed(
    corridor: &CorridorSpec,
    od: &OdMatrix,
    incident: Option<&IncidentScenario>,
    cfg: &SimConfig,
) -> Result<(SpeedSeries, RunStats)> {
    Engine::new(corridor, od, incident, cfg)?.run(None)
}

/// Like [`run`] but dumps a per-step trace as CSV rows
/// `(t_s, vehicle_id, link, lane, pos_m, speed_mps)`.
pub fn run_traced<W: Write>(
    corridor: &CorridorSpec,
    od: &OdMatrix,
    incident: Option<&IncidentScenario>,
    cfg: &SimConfig,
    trace: &mut W,
) -> Result<(SpeedSeries, RunStats)> {
    writeln!(trace, "t_s,vehicle_id,link,lane,pos_m,speed_mps")
        .map_err(|e| Error::io("trace", e))?;
    Engine::new(corridor, od, incident, cfg)?.run(Some(trace))
}

/// Runs independent jobs concurrently on up to `workers` threads. Results are
/// order-preserving and identical to sequential execution per job.
pub fn run_batch(
    corridor: &CorridorSpec,
    jobs: &[BatchJob],
    cfg: &SimConfig,
    workers: usize,
) -> Result<Vec<SpeedSeries>> {
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidSimConfig(format!("worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(index, job)| {
                let mut job_cfg = cfg.clone();
                job_cfg.seed = job.seed;
                run(corridor, &job.od, job.incident.as_ref(), &job_cfg)
                    .map_err(|e| Error::BatchJob { index, source: Box::new(e) })
            })
            .collect()
    })
}

const STOPPED_SPEED: f64 = 0.5;
/// Gap below which a stalled vehicle starts forcing its way out, m.
const STUCK_MERGE_RANGE_M: f64 = 60.0;

struct Engine<'a> {
    corridor: &'a CorridorSpec,
    cfg: &'a SimConfig,
    rng: ChaCha8Rng,
    vehicles: Vec<Vehicle>,
    /// Vehicle ids per lane, ascending by position.
    lanes: Vec<Vec<u32>>,
    /// Global coordinates where links S and D begin, and the total length.
    boundaries: [f64; 3],
    arrival_rate_per_s: f64,
    next_arrival_s: f64,
    /// (arrival time, desired speed) of arrivals waiting to enter.
    pending: std::collections::VecDeque<(f64, f64)>,
    incident: Option<Incident>,
    injected: u64,
    exited: u64,
    min_gap_observed: f64,
    collision_steps: u64,
}

struct Incident {
    start_s: f64,
    end_s: f64,
    /// (lane, front position) of each block.
    blocks: Vec<(u8, f64)>,
    /// Obstacle id per block once placed. Placement waits for a clear slot
    /// so the minimum-gap invariant is never violated by fiat.
    placed: Vec<Option<u32>>,
    cleared: bool,
}

impl<'a> Engine<'a> {
    fn new(
        corridor: &'a CorridorSpec,
        od: &OdMatrix,
        incident: Option<&IncidentScenario>,
        cfg: &'a SimConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let rate = od.total();
        if rate > cfg.saturation_ceiling_veh_h {
            return Err(Error::CapacityViolation { rate, ceiling: cfg.saturation_ceiling_veh_h });
        }
        if let Some(inc) = incident {
            if inc.start_min < cfg.record_start_min() || inc.end_min > cfg.horizon_end_min {
                return Err(Error::InvalidScenario(format!(
                    "incident {} - {} outside recorded horizon {} - {}",
                    inc.start_min,
                    inc.end_min,
                    cfg.record_start_min(),
                    cfg.horizon_end_min
                )));
            }
        }

        let s_start = corridor.link_start_m(Link::Study);
        let d_start = corridor.link_start_m(Link::Downstream);
        let total = corridor.total_length_m();

        let incident = incident.map(|inc| {
            let base = s_start + inc.position.offset_fraction() * corridor.link(Link::Study).length_m;
            let blocks = match inc.blocks.as_slice() {
                [a] => vec![(a.index() as u8, base)],
                [a, b] if a == b => {
                    vec![(a.index() as u8, base), (a.index() as u8, base + SAME_LANE_SPACING_M)]
                }
                [a, b] => vec![(a.index() as u8, base), (b.index() as u8, base)],
                _ => unreachable!("scenario validated to 1 or 2 blocks"),
            };
            let n = blocks.len();
            Incident {
                start_s: inc.start_min as f64 * 60.0,
                end_s: inc.end_min as f64 * 60.0,
                blocks,
                placed: vec![None; n],
                cleared: false,
            }
        });

        Ok(Engine {
            corridor,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            vehicles: Vec::with_capacity(4096),
            lanes: vec![Vec::with_capacity(512); corridor.lanes_per_link],
            boundaries: [s_start, d_start, total],
            arrival_rate_per_s: rate / 3600.0,
            next_arrival_s: cfg.horizon_start_min as f64 * 60.0,
            pending: std::collections::VecDeque::new(),
            incident,
            injected: 0,
            exited: 0,
            min_gap_observed: f64::INFINITY,
            collision_steps: 0,
        })
    }

    fn run(mut self, mut trace: Option<&mut dyn Write>) -> Result<(SpeedSeries, RunStats)> {
        let cfg = self.cfg;
        let dt = cfg.dt_s;
        let steps_per_min = (60.0 / dt).round() as u32;
        let total_min = cfg.horizon_end_min - cfg.horizon_start_min;
        let record_from = cfg.warm_up_min;

        let mut series: [Vec<f64>; 3] = Default::default();
        // Per-link accumulators for the current minute.
        let mut minute_sum = [0.0f64; 3];
        let mut minute_steps = [0u32; 3];

        if self.arrival_rate_per_s > 0.0 {
            self.next_arrival_s += self.sample_headway();
        } else {
            self.next_arrival_s = f64::INFINITY;
        }

        for minute in 0..total_min {
            for s in 0..steps_per_min {
                let step = minute * steps_per_min + s;
                let t = cfg.horizon_start_min as f64 * 60.0 + step as f64 * dt;

                self.update_incident(t);
                self.inject(t);
                self.lane_changes(step);
                let link_means = self.advance(dt);
                for l in 0..3 {
                    if let Some(mean) = link_means[l] {
                        minute_sum[l] += mean;
                        minute_steps[l] += 1;
                    }
                }
                if let Some(w) = trace.as_deref_mut() {
                    self.write_trace(w, t + dt)?;
                }
            }
            if minute >= record_from {
                for l in 0..3 {
                    let kmh = if minute_steps[l] > 0 {
                        3.6 * minute_sum[l] / minute_steps[l] as f64
                    } else {
                        self.corridor.links[l].free_flow_kmh
                    };
                    series[l].push(kmh);
                }
            }
            minute_sum = [0.0; 3];
            minute_steps = [0; 3];

            debug_assert_eq!(
                self.injected,
                self.exited + self.on_road_count(),
                "vehicle conservation violated at minute {minute}"
            );
        }

        let stats = RunStats {
            injected: self.injected,
            exited: self.exited,
            on_road: self.on_road_count(),
            min_gap_observed_m: self.min_gap_observed,
            collision_steps: self.collision_steps,
        };
        let out = SpeedSeries { start_min: cfg.record_start_min(), speeds: series };
        Ok((out, stats))
    }

    fn on_road_count(&self) -> u64 {
        self.lanes
            .iter()
            .map(|l| l.iter().filter(|&&id| !self.vehicles[id as usize].is_obstacle).count() as u64)
            .sum()
    }

    fn sample_headway(&mut self) -> f64 {
        // Exponential inter-arrival via inverse transform.
        let u: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        -u.ln() / self.arrival_rate_per_s
    }

    fn update_incident(&mut self, t: f64) {
        let Some(mut inc) = self.incident.take() else { return };
        self.advance_incident(t, &mut inc);
        self.incident = Some(inc);
    }

    fn advance_incident(&mut self, t: f64, inc: &mut Incident) {
        if inc.cleared {
            return;
        }
        if t >= inc.end_s {
            // Blocks disappear instantaneously at clearance.
            for id in inc.placed.iter().flatten() {
                let lane = self.vehicles[*id as usize].lane as usize;
                self.lanes[lane].retain(|v| v != id);
                self.vehicles[*id as usize].exited = true;
            }
            inc.cleared = true;
            return;
        }
        if t < inc.start_s {
            return;
        }
        let min_gap = self.cfg.min_gap_m;
        let obs_len = self.cfg.obstacle_len_m;
        for (b, &(lane, pos)) in inc.blocks.iter().enumerate() {
            if inc.placed[b].is_some() {
                continue;
            }
            let lane_vec = &self.lanes[lane as usize];
            let at = lane_vec.partition_point(|&v| self.vehicles[v as usize].pos < pos);
            let leader_ok = lane_vec.get(at).map_or(true, |&l| {
                let lead = &self.vehicles[l as usize];
                lead.pos - lead.len - pos >= min_gap
            });
            let follower_ok = at.checked_sub(1).map_or(true, |i| {
                pos - obs_len - self.vehicles[lane_vec[i] as usize].pos >= min_gap
            });
            if !(leader_ok && follower_ok) {
                continue; // retry next step once the slot is clear
            }
            let id = self.vehicles.len() as u32;
            self.vehicles.push(Vehicle {
                id,
                lane,
                pos,
                speed: 0.0,
                desired_speed: 0.0,
                len: obs_len,
                is_obstacle: true,
                exited: false,
                cooldown_steps: 0,
                stopped_s: 0.0,
            });
            self.lanes[lane as usize].insert(at, id);
            inc.placed[b] = Some(id);
        }
    }

    fn inject(&mut self, t: f64) {
        while t >= self.next_arrival_s {
            let (lo, hi) = self.cfg.desired_speed_kmh;
            let desired = self.rng.gen_range(lo..=hi) / 3.6;
            self.pending.push_back((self.next_arrival_s, desired));
            self.next_arrival_s += self.sample_headway();
        }
        // Arrivals stuck behind a spillback give up and divert.
        while let Some(&(arrived, _)) = self.pending.front() {
            if t - arrived > self.cfg.entry_patience_s {
                self.pending.pop_front();
            } else {
                break;
            }
        }
        while let Some(&(_, desired)) = self.pending.front() {
            let Some((lane, entry_speed)) = self.entry_lane(desired) else { break };
            let id = self.vehicles.len() as u32;
            self.vehicles.push(Vehicle {
                id,
                lane,
                pos: 0.0,
                speed: entry_speed,
                desired_speed: desired,
                len: self.cfg.vehicle_len_m,
                is_obstacle: false,
                exited: false,
                cooldown_steps: 0,
                stopped_s: 0.0,
            });
            self.lanes[lane as usize].insert(0, id);
            self.pending.pop_front();
            self.injected += 1;
        }
    }

    /// Lane with the most entry clearance, if any lane admits the vehicle.
    fn entry_lane(&self, desired: f64) -> Option<(u8, f64)> {
        let mut best: Option<(u8, f64, f64)> = None;
        for (li, lane) in self.lanes.iter().enumerate() {
            let (clearance, speed) = match lane.first() {
                None => (f64::INFINITY, desired),
                Some(&rear) => {
                    let v = &self.vehicles[rear as usize];
                    let clearance = v.pos - v.len;
                    // Enter as fast as the clearance safely allows.
                    let safe =
                        (clearance - self.cfg.min_gap_m).max(0.0) / self.cfg.headway_time_s;
                    (clearance, desired.min(safe.max(v.speed)))
                }
            };
            let needed = self.cfg.min_gap_m + speed * self.cfg.headway_time_s;
            if clearance >= needed {
                let margin = clearance - needed;
                if best.map_or(true, |(_, m, _)| margin > m) {
                    best = Some((li as u8, margin, speed));
                }
            }
        }
        best.map(|(lane, _, speed)| (lane, speed))
    }

    fn idm_accel(&self, speed: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
        let cfg = self.cfg;
        let free = if desired > 0.0 {
            cfg.max_accel * (1.0 - (speed / desired).powf(cfg.accel_exponent))
        } else {
            0.0
        };
        match leader {
            None => free,
            Some((gap, lead_speed)) => {
                if gap <= 0.1 {
                    return -cfg.lc_forced_decel;
                }
                let dv = speed - lead_speed;
                let s_star = cfg.min_gap_m
                    + (speed * cfg.headway_time_s
                        + speed * dv / (2.0 * (cfg.max_accel * cfg.comfortable_decel).sqrt()))
                    .max(0.0);
                free - cfg.max_accel * (s_star / gap).powi(2)
            }
        }
    }

    fn gap_to(&self, follower_pos: f64, leader: &Vehicle) -> f64 {
        leader.pos - leader.len - follower_pos
    }

    /// Distance to the nearest placed block ahead in `lane`, if within the
    /// anticipation range.
    fn dist_to_block(&self, lane: u8, pos: f64) -> Option<f64> {
        let inc = self.incident.as_ref()?;
        let mut best: Option<f64> = None;
        for (b, &(block_lane, block_pos)) in inc.blocks.iter().enumerate() {
            if inc.placed[b].is_some() && block_lane == lane && block_pos > pos {
                let d = block_pos - pos;
                if d <= self.cfg.lc_anticipation_m && best.map_or(true, |x| d < x) {
                    best = Some(d);
                }
            }
        }
        best
    }

    fn find_in_lane(&self, lane: u8, id: u32) -> usize {
        let lane_vec = &self.lanes[lane as usize];
        let pos = self.vehicles[id as usize].pos;
        let mut at = lane_vec.partition_point(|&v| self.vehicles[v as usize].pos < pos);
        // Walk over any equal-position neighbours.
        while lane_vec[at] != id {
            at += 1;
        }
        at
    }

    fn lane_changes(&mut self, step: u32) {
        let n = self.vehicles.len();
        for idx in 0..n {
            let v = &self.vehicles[idx];
            if v.is_obstacle || v.exited || v.cooldown_steps > 0 {
                continue;
            }
            // Stagger evaluations so each vehicle checks about once a second.
            if (step as usize + idx) % 2 != 0 {
                continue;
            }
            self.try_lane_change(idx as u32);
        }
        for v in &mut self.vehicles {
            v.cooldown_steps = v.cooldown_steps.saturating_sub(1);
        }
    }

    fn try_lane_change(&mut self, id: u32) {
        let cfg = self.cfg;
        let me = self.vehicles[id as usize].clone();
        let my_idx = self.find_in_lane(me.lane, id);
        let cur_lane = &self.lanes[me.lane as usize];

        let cur_leader = cur_lane.get(my_idx + 1).map(|&l| &self.vehicles[l as usize]);
        let a_cur = self.idm_accel(
            me.speed,
            me.desired_speed,
            cur_leader.map(|l| (self.gap_to(me.pos, l), l.speed)),
        );
        // A vehicle stalled behind a blockage merges forcefully.
        let stuck = me.stopped_s >= cfg.lc_stuck_after_s
            && cur_leader.map_or(false, |l| {
                l.speed < STOPPED_SPEED && self.gap_to(me.pos, l) < STUCK_MERGE_RANGE_M
            });
        // Drivers leave a blocked lane well before reaching the obstacle.
        let my_block = self.dist_to_block(me.lane, me.pos);
        let urgent = stuck || my_block.is_some();

        let mut best: Option<(u8, f64)> = None;
        for target in adjacent_lanes(me.lane, self.lanes.len() as u8) {
            // Never trade into a lane blocked as near or nearer ahead.
            if let Some(td) = self.dist_to_block(target, me.pos) {
                if my_block.map_or(true, |md| td <= md) {
                    continue;
                }
            }
            let lane_vec = &self.lanes[target as usize];
            let at = lane_vec.partition_point(|&v| self.vehicles[v as usize].pos < me.pos);
            let new_leader = lane_vec.get(at).map(|&l| &self.vehicles[l as usize]);
            let new_follower = at.checked_sub(1).map(|i| &self.vehicles[lane_vec[i] as usize]);

            if let Some(l) = new_leader {
                if self.gap_to(me.pos, l) < cfg.min_gap_m {
                    continue;
                }
            }
            if let Some(f) = new_follower {
                if me.pos - me.len - f.pos < cfg.min_gap_m {
                    continue;
                }
            }

            let a_new = self.idm_accel(
                me.speed,
                me.desired_speed,
                new_leader.map(|l| (self.gap_to(me.pos, l), l.speed)),
            );

            let mut follower_term = 0.0;
            if let Some(f) = new_follower {
                if !f.is_obstacle {
                    let a_fol_new = self.idm_accel(
                        f.speed,
                        f.desired_speed,
                        Some((me.pos - me.len - f.pos, me.speed)),
                    );
                    // Merges far from a block stay gentle; the imposed
                    // braking allowance escalates as the block nears.
                    let limit = if stuck {
                        cfg.lc_forced_decel
                    } else if my_block.map_or(false, |d| d < 200.0) {
                        cfg.lc_safe_decel
                    } else if my_block.is_some() {
                        cfg.comfortable_decel
                    } else {
                        cfg.lc_safe_decel
                    };
                    if a_fol_new < -limit {
                        continue;
                    }
                    let a_fol_old = self.idm_accel(
                        f.speed,
                        f.desired_speed,
                        new_leader.map(|l| (self.gap_to(f.pos, l), l.speed)),
                    );
                    follower_term = a_fol_new - a_fol_old;
                }
            }

            let politeness = if urgent { 0.0 } else { cfg.lc_politeness };
            let incentive = a_new - a_cur + politeness * follower_term;
            let threshold = if urgent { -0.5 } else { cfg.lc_threshold };
            if incentive > threshold && best.map_or(true, |(_, b)| a_new > b) {
                best = Some((target, a_new));
            }
        }

        if let Some((target, _)) = best {
            self.lanes[me.lane as usize].remove(my_idx);
            let lane_vec = &mut self.lanes[target as usize];
            let at = lane_vec.partition_point(|&v| self.vehicles[v as usize].pos < me.pos);
            lane_vec.insert(at, id);
            let v = &mut self.vehicles[id as usize];
            v.lane = target;
            v.cooldown_steps = (cfg.lc_cooldown_s / cfg.dt_s).round() as u32;
        }
    }

    /// One acceleration/movement step. Returns the per-link space-mean speed
    /// for this step (None where the link is empty).
    fn advance(&mut self, dt: f64) -> [Option<f64>; 3] {
        let cfg = self.cfg;
        let mut sums = [0.0f64; 3];
        let mut counts = [0u32; 3];
        let mut collided = false;

        // Positions of active blocks; vehicles passing within
        // rubberneck_len_m upstream of one cap their speed.
        let slow_zones: Vec<f64> = match &self.incident {
            Some(inc) if cfg.rubberneck_len_m > 0.0 && !inc.cleared => inc
                .blocks
                .iter()
                .enumerate()
                .filter(|(b, _)| inc.placed[*b].is_some())
                .map(|(_, &(_, pos))| pos)
                .collect(),
            _ => Vec::new(),
        };
        let rubberneck_mps = cfg.rubberneck_speed_kmh / 3.6;

        for lane_i in 0..self.lanes.len() {
            let mut leader_old: Option<(f64, f64)> = None; // (rear pos, speed)
            let mut leader_new_rear = f64::INFINITY;
            let lane = std::mem::take(&mut self.lanes[lane_i]);
            for &id in lane.iter().rev() {
                let v = &self.vehicles[id as usize];
                let old = (v.pos - v.len, v.speed);
                if !v.is_obstacle {
                    let leader = leader_old.map(|(rear, speed)| (rear - v.pos, speed));
                    let mut acc = self.idm_accel(v.speed, v.desired_speed, leader);
                    if slow_zones
                        .iter()
                        .any(|&p| v.pos <= p && v.pos >= p - cfg.rubberneck_len_m)
                    {
                        // Ease toward the zone cap, never braking harder for
                        // it than a lane change would impose.
                        let toward_cap = self
                            .idm_accel(v.speed, rubberneck_mps, None)
                            .max(-cfg.lc_safe_decel);
                        acc = acc.min(toward_cap);
                    }
                    let v = &mut self.vehicles[id as usize];
                    let mut new_speed = (v.speed + acc * dt).clamp(0.0, v.desired_speed);
                    let mut new_pos = v.pos + new_speed * dt;
                    let limit = leader_new_rear - cfg.min_gap_m;
                    if new_pos > limit {
                        new_pos = limit.max(v.pos);
                        new_speed = (new_pos - v.pos) / dt;
                    }
                    v.pos = new_pos;
                    v.speed = new_speed;
                    if new_speed < STOPPED_SPEED {
                        v.stopped_s += dt;
                    } else {
                        v.stopped_s = 0.0;
                    }
                    let gap = leader_new_rear - new_pos;
                    if gap.is_finite() {
                        self.min_gap_observed = self.min_gap_observed.min(gap);
                        if gap < cfg.min_gap_m - 1e-9 {
                            collided = true;
                        }
                    }
                    if new_pos < self.boundaries[2] {
                        let link = link_of(new_pos, &self.boundaries);
                        sums[link] += new_speed;
                        counts[link] += 1;
                    }
                }
                let v = &self.vehicles[id as usize];
                leader_old = Some(old);
                leader_new_rear = v.pos - v.len;
            }
            self.lanes[lane_i] = lane;

            // Exits at the downstream end.
            while let Some(&front) = self.lanes[lane_i].last() {
                let v = &self.vehicles[front as usize];
                if !v.is_obstacle && v.pos >= self.boundaries[2] {
                    self.lanes[lane_i].pop();
                    self.vehicles[front as usize].exited = true;
                    self.exited += 1;
                } else {
                    break;
                }
            }
        }
        if collided {
            self.collision_steps += 1;
        }

        let mut out = [None; 3];
        for l in 0..3 {
            if counts[l] > 0 {
                out[l] = Some(sums[l] / counts[l] as f64);
            }
        }
        out
    }

    fn write_trace(&self, w: &mut dyn Write, t: f64) -> Result<()> {
        for lane in &self.lanes {
            for &id in lane {
                let v = &self.vehicles[id as usize];
                if v.is_obstacle {
                    continue;
                }
                let link = Link::ALL[link_of(v.pos.min(self.boundaries[2] - 1e-9), &self.boundaries)];
                writeln!(
                    w,
                    "{:.1},{},{},{},{:.2},{:.3}",
                    t,
                    v.id,
                    link.short_name(),
                    v.lane,
                    v.pos,
                    v.speed
                )
                .map_err(|e| Error::io("trace", e))?;
            }
        }
        Ok(())
    }
}

fn adjacent_lanes(lane: u8, n_lanes: u8) -> impl Iterator<Item = u8> {
    let left = lane.checked_sub(1);
    let right = if lane + 1 < n_lanes { Some(lane + 1) } else { None };
    left.into_iter().chain(right)
}

fn link_of(pos: f64, boundaries: &[f64; 3]) -> usize {
    if pos < boundaries[0] {
        0
    } else if pos < boundaries[1] {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corridor::{BlockPosition, DemandLevel, LanePos};

    fn corridor() -> CorridorSpec {
        CorridorSpec::default()
    }

    fn cfg(seed: u64) -> SimConfig {
        SimConfig { seed, ..SimConfig::default() }
    }

    fn od(level: DemandLevel) -> OdMatrix {
        OdMatrix::single_source(3171.0 * level.scale()).unwrap()
    }

    fn scenario(demand: DemandLevel, position: BlockPosition, blocks: Vec<LanePos>) -> IncidentScenario {
        IncidentScenario::new(demand, position, blocks, 430, 460).unwrap()
    }

    #[test]
    fn zero_demand_records_free_flow() {
        let series = run(&corridor(), &OdMatrix::single_source(0.0).unwrap(), None, &cfg(1)).unwrap();
        assert_eq!(series.start_min, 404);
        assert_eq!(series.len_minutes(), 76);
        for link in Link::ALL {
            for m in series.start_min..series.end_min() {
                assert_eq!(series.get(link, m), Some(100.0));
            }
        }
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let c = corridor();
        let a = run(&c, &od(DemandLevel::Medium), None, &cfg(7)).unwrap();
        let b = run(&c, &od(DemandLevel::Medium), None, &cfg(7)).unwrap();
        assert_eq!(a, b);
        let d = run(&c, &od(DemandLevel::Medium), None, &cfg(8)).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn medium_demand_stays_near_free_flow() {
        let series = run(&corridor(), &od(DemandLevel::Medium), None, &cfg(3)).unwrap();
        let ff = 100.0;
        for m in series.start_min..series.end_min() {
            let s = series.get(Link::Study, m).unwrap();
            assert!(
                (s - ff).abs() <= 0.15 * ff,
                "minute {m}: study speed {s} outside +-15% of {ff}"
            );
        }
    }

    #[test]
    fn conservation_and_no_collisions_incident_run() {
        let sc = scenario(
            DemandLevel::High,
            BlockPosition::Center,
            vec![LanePos::Left, LanePos::Middle],
        );
        let (_, stats) = run_detailed(&corridor(), &od(DemandLevel::High), Some(&sc), &cfg(11)).unwrap();
        assert_eq!(stats.injected, stats.exited + stats.on_road);
        assert_eq!(stats.collision_steps, 0, "min gap seen {}", stats.min_gap_observed_m);
        assert!(stats.injected > 1000, "high demand should inject many vehicles");
    }

    #[test]
    fn capacity_ceiling_is_enforced() {
        let err = run(&corridor(), &OdMatrix::single_source(9000.0).unwrap(), None, &cfg(1));
        assert!(matches!(err, Err(Error::CapacityViolation { .. })));
    }

    #[test]
    fn three_phase_profile_for_center_two_lane_block() {
        let sc = scenario(
            DemandLevel::High,
            BlockPosition::Center,
            vec![LanePos::Left, LanePos::Right],
        );
        let series = run(&corridor(), &od(DemandLevel::High), Some(&sc), &cfg(5)).unwrap();
        let pre = series.mean_study_speed(sc.start_min - 10, sc.start_min);
        // Sharp drop within 5 minutes of onset.
        let early_min = (sc.start_min + 1..=sc.start_min + 5)
            .map(|m| series.get(Link::Study, m).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(
            early_min <= 0.7 * pre,
            "speed {early_min} did not drop 30% below pre-incident {pre}"
        );
        // Plateau while the blocks are in place.
        let plateau = series.mean_study_speed(sc.start_min + 10, sc.end_min);
        assert!(plateau <= 0.5 * pre, "plateau {plateau} vs pre {pre}");
        // Recovery within 10 minutes of clearance.
        let recovered = (sc.end_min..sc.end_min + 10)
            .map(|m| series.get(Link::Study, m).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            recovered >= 0.9 * pre,
            "speed {recovered} did not recover to within 10% of pre-incident {pre}"
        );
    }

    #[test]
    fn two_blocked_lanes_are_worse_than_one() {
        let c = corridor();
        let one = scenario(DemandLevel::High, BlockPosition::Center, vec![LanePos::Middle]);
        let two = scenario(
            DemandLevel::High,
            BlockPosition::Center,
            vec![LanePos::Middle, LanePos::Right],
        );
        let s1 = run(&c, &od(DemandLevel::High), Some(&one), &cfg(21)).unwrap();
        let s2 = run(&c, &od(DemandLevel::High), Some(&two), &cfg(21)).unwrap();
        let m1 = s1.mean_study_speed(430, 460);
        let m2 = s2.mean_study_speed(430, 460);
        assert!(m2 <= m1, "two blocked lanes {m2} should be slower than one {m1}");
    }

    #[test]
    fn start_block_is_by_far_the_mildest_position() {
        // A block at the start of the link leaves almost the whole link
        // flowing freely: only the tail of the slow zone reaches into it,
        // while a Center or End block drags down a large stretch. The mean
        // speed under a Start block stays close to the pre-incident level and
        // clearly above the other positions.
        let c = corridor();
        let best_of = |position| {
            let sc = scenario(DemandLevel::High, position, vec![LanePos::Middle]);
            let series = run(&c, &od(DemandLevel::High), Some(&sc), &cfg(13)).unwrap();
            let pre = series.mean_study_speed(sc.start_min - 10, sc.start_min);
            let best = (sc.start_min + 1..sc.end_min)
                .map(|m| series.get(Link::Study, m).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            (pre, best)
        };
        let (pre, start) = best_of(BlockPosition::Start);
        let (_, center) = best_of(BlockPosition::Center);
        let (_, end) = best_of(BlockPosition::End);
        assert!(
            start >= 0.9 * pre,
            "best Start-block minute {start} fell more than 10% below pre-incident mean {pre}"
        );
        assert!(start > center, "Start best {start} not above Center best {center}");
        assert!(start > end, "Start best {start} not above End best {end}");
    }

    #[test]
    fn batch_matches_sequential_and_preserves_order() {
        let c = corridor();
        let jobs: Vec<BatchJob> = (0..4)
            .map(|i| BatchJob {
                od: od(DemandLevel::Medium),
                incident: None,
                seed: 100 + i,
            })
            .collect();
        let batch = run_batch(&c, &jobs, &cfg(0), 2).unwrap();
        assert_eq!(batch.len(), 4);
        for (job, out) in jobs.iter().zip(&batch) {
            let mut job_cfg = cfg(job.seed);
            job_cfg.seed = job.seed;
            let seq = run(&c, &job.od, None, &job_cfg).unwrap();
            assert_eq!(&seq, out);
        }
        // Batch of one equals a plain run.
        let single = run_batch(&c, &jobs[..1], &cfg(0), 1).unwrap();
        assert_eq!(single[0], batch[0]);
    }

    #[test]
    fn batch_error_carries_job_index() {
        let c = corridor();
        let jobs = vec![
            BatchJob { od: od(DemandLevel::Low), incident: None, seed: 1 },
            BatchJob { od: OdMatrix::single_source(9000.0).unwrap(), incident: None, seed: 2 },
        ];
        match run_batch(&c, &jobs, &cfg(0), 2) {
            Err(Error::BatchJob { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected batch job error, got {other:?}"),
        }
    }

    #[test]
    fn trace_dump_has_expected_columns() {
        let mut cfg = cfg(2);
        cfg.horizon_end_min = cfg.horizon_start_min + 8;
        cfg.warm_up_min = 6;
        let mut buf = Vec::new();
        run_traced(&corridor(), &od(DemandLevel::Low), None, &cfg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t_s,vehicle_id,link,lane,pos_m,speed_mps");
        assert!(lines.next().is_some());
    }
}
