//! Max-pressure signal control with practical timing constraints.
//!
//! The controller grants green to the phase with the highest pressure,
//! where pressure is the number of observed vehicles within the upstream
//! window of the phase's incoming lanes minus the number within the
//! downstream window of its outgoing lanes. Switches are only considered
//! once per decision period, never before the minimum green has elapsed,
//! and always run through a fixed yellow and all-red interval; ties keep
//! the current phase.
//!
//! All interval accounting is in whole simulation ticks, so durations are
//! exact and runs are reproducible. The controller consumes only fused
//! observation lists; it does not know or care whether they came from
//! cooperative perception, CV self reports, or ground truth.

use crate::error::{Error, Result};
use crate::fusion::FusedVehicleObservation;
use crate::traffic::{Interval, PhaseDefinition, PhaseId, SignalState};

/// Timing and window parameters.
#[derive(Debug, Clone, Copy)]
pub struct ControllerConfig {
    pub min_green: f64,
    pub yellow: f64,
    pub all_red: f64,
    /// Seconds between pressure evaluations.
    pub decision_period: f64,
    /// Incoming-lane window upstream of the stop bar, meters.
    pub upstream_window: f64,
    /// Outgoing-lane window downstream of the stop bar, meters.
    pub downstream_window: f64,
    /// Observation frames older than this are treated as empty, seconds.
    pub staleness_limit: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            min_green: 5.0,
            yellow: 4.0,
            all_red: 1.0,
            decision_period: 1.0,
            upstream_window: 200.0,
            downstream_window: 100.0,
            staleness_limit: 1.0,
        }
    }
}

/// Pressure of one phase given lane-mapped observations: incoming count
/// within the upstream window minus outgoing count within the downstream
/// window.
pub fn pressure(
    phase: &PhaseDefinition,
    observations: &[FusedVehicleObservation],
    upstream_window: f64,
    downstream_window: f64,
) -> i64 {
    let mut incoming = 0i64;
    let mut outgoing = 0i64;
    for obs in observations {
        let d = obs.distance_to_stop_bar;
        if phase.incoming.contains(&obs.lane) && (0.0..=upstream_window).contains(&d) {
            incoming += 1;
        }
        if phase.outgoing.contains(&obs.lane) && d < 0.0 && d >= -downstream_window {
            outgoing += 1;
        }
    }
    incoming - outgoing
}

/// The sequential signal state machine.
pub struct Controller {
    phases: Vec<PhaseDefinition>,
    cfg: ControllerConfig,
    dt: f64,
    active: PhaseId,
    interval: Interval,
    elapsed_ticks: u64,
    target: PhaseId,
    calls: u64,
    decision_every: u64,
    min_green_ticks: u64,
    yellow_ticks: u64,
    all_red_ticks: u64,
    staleness_ticks: u64,
    last_frame: Option<(u64, Vec<FusedVehicleObservation>)>,
}

impl Controller {
    pub fn new(phases: Vec<PhaseDefinition>, cfg: ControllerConfig, dt: f64) -> Result<Controller> {
        if phases.is_empty() {
            return Err(Error::config("controller needs at least one phase"));
        }
        let to_ticks = |name: &str, secs: f64| -> Result<u64> {
            let ticks = secs / dt;
            if !(secs > 0.0) || (ticks - ticks.round()).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "{name} ({secs} s) must be a positive multiple of dt ({dt} s)"
                )));
            }
            Ok(ticks.round() as u64)
        };
        Ok(Controller {
            active: phases[0].id,
            target: phases[0].id,
            phases,
            dt,
            interval: Interval::Green,
            elapsed_ticks: 0,
            calls: 0,
            decision_every: to_ticks("decision_period", cfg.decision_period)?,
            min_green_ticks: to_ticks("min_green", cfg.min_green)?,
            yellow_ticks: to_ticks("yellow", cfg.yellow)?,
            all_red_ticks: to_ticks("all_red", cfg.all_red)?,
            staleness_ticks: to_ticks("staleness_limit", cfg.staleness_limit)?,
            last_frame: None,
            cfg,
        })
    }

    pub fn signal(&self) -> SignalState {
        SignalState {
            active_phase: self.active,
            interval: self.interval,
            elapsed: self.elapsed_ticks as f64 * self.dt,
        }
    }

    /// Hand the controller the freshest observation frame.
    pub fn submit_frame(&mut self, tick: u64, observations: Vec<FusedVehicleObservation>) {
        self.last_frame = Some((tick, observations));
    }

    /// Pressures per phase from the last frame; an over-age frame counts
    /// as empty.
    pub fn current_pressures(&self) -> Vec<f64> {
        let empty: &[FusedVehicleObservation] = &[];
        let now = self.calls.saturating_sub(1);
        let obs = match &self.last_frame {
            Some((tick, obs)) if now.saturating_sub(*tick) <= self.staleness_ticks => {
                obs.as_slice()
            }
            _ => empty,
        };
        self.phases
            .iter()
            .map(|p| pressure(p, obs, self.cfg.upstream_window, self.cfg.downstream_window) as f64)
            .collect()
    }

    /// Advance one simulation tick and return the signal governing it.
    ///
    /// `elapsed_ticks` counts ticks already served in the current
    /// interval, so a yellow of 4 s governs exactly 40 ticks and a green
    /// runs at least `min_green` before a switch can begin.
    pub fn step(&mut self) -> SignalState {
        self.calls += 1;
        // Roll completed fixed intervals before choosing this tick's
        // signal.
        if self.interval == Interval::Yellow && self.elapsed_ticks >= self.yellow_ticks {
            self.interval = Interval::AllRed;
            self.elapsed_ticks = 0;
        }
        if self.interval == Interval::AllRed && self.elapsed_ticks >= self.all_red_ticks {
            self.interval = Interval::Green;
            self.active = self.target;
            self.elapsed_ticks = 0;
        }
        // Decisions fall on whole decision periods of simulated time.
        if (self.calls - 1) % self.decision_every == 0 && self.interval == Interval::Green {
            let pressures = self.current_pressures();
            self.decide(&pressures);
        }
        let state = self.signal();
        self.elapsed_ticks += 1;
        state
    }

    /// Apply the max-pressure switching rule. Yellow and all-red always
    /// run to completion; in green, a switch starts only after the
    /// minimum green and only toward a strictly higher-pressure phase.
    pub fn decide(&mut self, pressures: &[f64]) {
        assert_eq!(pressures.len(), self.phases.len(), "one pressure per phase");
        if self.interval != Interval::Green || self.elapsed_ticks < self.min_green_ticks {
            return;
        }
        let mut best = 0usize;
        for (i, p) in pressures.iter().enumerate() {
            if *p > pressures[best] {
                best = i;
            }
        }
        let active_idx = self
            .phases
            .iter()
            .position(|p| p.id == self.active)
            .expect("active phase exists");
        // Ties retain the active phase.
        if best == active_idx || pressures[best] <= pressures[active_idx] {
            return;
        }
        self.target = self.phases[best].id;
        self.interval = Interval::Yellow;
        self.elapsed_ticks = 0;
    }
}
