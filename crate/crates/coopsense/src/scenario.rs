//! Scenario configuration: a flat key-value text format.
//!
//! One `key = value` pair per line; blank lines and lines starting with
//! `#` are ignored. Unknown keys are an error so typos fail fast. Every
//! key has a default matching the standard experiment: 500 veh/hr/ln on
//! the main street, 360 on the side street, a 64-channel infrastructure
//! LiDAR at 3 m in the middle of the intersection, CAV LiDARs at 2.4 m,
//! and max-pressure timing of 5 s minimum green, 4 s yellow, 1 s all-red.

use std::path::Path;

use crate::detection::{DetectorConfig, SizeBounds};
use crate::error::{Error, Result};
use crate::traffic::{DriverParams, SpawnSettings, VehicleDims};

/// How observations reach the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Cooperative perception: infrastructure + CAV LiDARs, raw merging,
    /// detection, decision-level fusion.
    Coop,
    /// Connected vehicles report their own (noisy) positions; no sensor
    /// simulation.
    Cv,
    /// Every vehicle's exact position is observed.
    Oracle,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Coop => "coop",
            Mode::Cv => "cv",
            Mode::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "coop" => Some(Mode::Coop),
            "cv" => Some(Mode::Cv),
            "oracle" => Some(Mode::Oracle),
            _ => None,
        }
    }
}

/// Which cloud(s) the detector consumes in coop mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectInput {
    /// One inference on the raw-merged cloud (the default pipeline).
    Merged,
    /// One inference per sensor on its local cloud; results are fused at
    /// the decision level only.
    PerSensor,
}

/// Complete description of one simulation run.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub dt_s: f64,

    pub main_volume_vphpl: f64,
    pub side_volume_vphpl: f64,
    pub cav_rate: f64,
    pub cv_rate: f64,
    pub side_left_ratio: f64,
    pub cv_noise_sigma_m: f64,

    pub v_free_mps: f64,
    pub a_max_mps2: f64,
    pub b_max_mps2: f64,
    pub min_gap_m: f64,
    pub headway_s: f64,
    pub veh_length_m: f64,
    pub veh_width_m: f64,
    pub veh_height_m: f64,

    pub lane_width_m: f64,
    pub upstream_m: f64,
    pub downstream_m: f64,
    pub clutter: bool,

    pub infra_lidar: bool,
    pub infra_height_m: f64,
    pub cav_lidar_height_m: f64,
    pub lidar_channels: usize,
    pub lidar_vfov_min_deg: f64,
    pub lidar_vfov_max_deg: f64,
    pub lidar_azimuth_step_deg: f64,
    pub lidar_max_range_m: f64,
    pub lidar_noise_sigma_m: f64,

    pub detect_input: DetectInput,
    pub ransac_distance_m: f64,
    pub ransac_samples: usize,
    pub ransac_iters: usize,
    pub ransac_passes: usize,
    pub dbscan_eps_m: f64,
    pub dbscan_min_pts: usize,
    pub size_length_min_m: f64,
    pub size_length_max_m: f64,
    pub size_width_min_m: f64,
    pub size_width_max_m: f64,
    pub size_height_min_m: f64,
    pub size_height_max_m: f64,
    pub dedupe_threshold_m: f64,

    pub min_green_s: f64,
    pub yellow_s: f64,
    pub all_red_s: f64,
    pub decision_period_s: f64,
    pub staleness_limit_s: f64,
    pub upstream_window_m: f64,
    pub downstream_window_m: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            mode: Mode::Coop,
            seed: 1,
            duration_s: 900.0,
            warmup_s: 120.0,
            dt_s: 0.1,
            main_volume_vphpl: 500.0,
            side_volume_vphpl: 360.0,
            cav_rate: 0.0,
            cv_rate: 0.0,
            side_left_ratio: 0.5,
            cv_noise_sigma_m: 1.5,
            v_free_mps: 13.9,
            a_max_mps2: 2.0,
            b_max_mps2: 4.5,
            min_gap_m: 2.0,
            headway_s: 1.0,
            veh_length_m: 4.4,
            veh_width_m: 1.7,
            veh_height_m: 1.5,
            lane_width_m: 3.5,
            upstream_m: 200.0,
            downstream_m: 100.0,
            clutter: true,
            infra_lidar: true,
            infra_height_m: 3.0,
            cav_lidar_height_m: 2.4,
            lidar_channels: 64,
            lidar_vfov_min_deg: -25.0,
            lidar_vfov_max_deg: 5.0,
            lidar_azimuth_step_deg: 0.4,
            lidar_max_range_m: 100.0,
            lidar_noise_sigma_m: 0.0,
            detect_input: DetectInput::Merged,
            ransac_distance_m: 0.2,
            ransac_samples: 3,
            ransac_iters: 3000,
            ransac_passes: 2,
            dbscan_eps_m: 1.25,
            dbscan_min_pts: 3,
            size_length_min_m: 0.5,
            size_length_max_m: 6.0,
            size_width_min_m: 0.5,
            size_width_max_m: 3.0,
            size_height_min_m: 0.1,
            size_height_max_m: 2.0,
            dedupe_threshold_m: 5.0,
            min_green_s: 5.0,
            yellow_s: 4.0,
            all_red_s: 1.0,
            decision_period_s: 1.0,
            staleness_limit_s: 1.0,
            upstream_window_m: 200.0,
            downstream_window_m: 100.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)?;
        ScenarioConfig::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, "expected 'key = value'"))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Set one key from its text form; used by the parser and by sweep
    /// grid overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, value: &str) -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| Error::config(format!("{key}: expected a number, got '{value}'")))
        }
        fn int(key: &str, value: &str) -> Result<u64> {
            value
                .parse::<u64>()
                .map_err(|_| Error::config(format!("{key}: expected an integer, got '{value}'")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::config(format!("{key}: expected true/false"))),
            }
        }
        match key {
            "mode" => {
                self.mode = Mode::parse(value)
                    .ok_or_else(|| Error::config(format!("unknown mode '{value}'")))?;
            }
            "seed" => self.seed = int(key, value)?,
            "duration_s" => self.duration_s = num(key, value)?,
            "warmup_s" => self.warmup_s = num(key, value)?,
            "dt_s" => self.dt_s = num(key, value)?,
            "main_volume_vphpl" => self.main_volume_vphpl = num(key, value)?,
            "side_volume_vphpl" => self.side_volume_vphpl = num(key, value)?,
            "cav_rate" => self.cav_rate = num(key, value)?,
            "cv_rate" => self.cv_rate = num(key, value)?,
            "side_left_ratio" => self.side_left_ratio = num(key, value)?,
            "cv_noise_sigma_m" => self.cv_noise_sigma_m = num(key, value)?,
            "v_free_mps" => self.v_free_mps = num(key, value)?,
            "a_max_mps2" => self.a_max_mps2 = num(key, value)?,
            "b_max_mps2" => self.b_max_mps2 = num(key, value)?,
            "min_gap_m" => self.min_gap_m = num(key, value)?,
            "headway_s" => self.headway_s = num(key, value)?,
            "veh_length_m" => self.veh_length_m = num(key, value)?,
            "veh_width_m" => self.veh_width_m = num(key, value)?,
            "veh_height_m" => self.veh_height_m = num(key, value)?,
            "lane_width_m" => self.lane_width_m = num(key, value)?,
            "upstream_m" => self.upstream_m = num(key, value)?,
            "downstream_m" => self.downstream_m = num(key, value)?,
            "clutter" => self.clutter = flag(key, value)?,
            "infra_lidar" => self.infra_lidar = flag(key, value)?,
            "infra_height_m" => self.infra_height_m = num(key, value)?,
            "cav_lidar_height_m" => self.cav_lidar_height_m = num(key, value)?,
            "lidar_channels" => self.lidar_channels = int(key, value)? as usize,
            "lidar_vfov_min_deg" => self.lidar_vfov_min_deg = num(key, value)?,
            "lidar_vfov_max_deg" => self.lidar_vfov_max_deg = num(key, value)?,
            "lidar_azimuth_step_deg" => self.lidar_azimuth_step_deg = num(key, value)?,
            "lidar_max_range_m" => self.lidar_max_range_m = num(key, value)?,
            "lidar_noise_sigma_m" => self.lidar_noise_sigma_m = num(key, value)?,
            "detect_input" => {
                self.detect_input = match value {
                    "merged" => DetectInput::Merged,
                    "per_sensor" => DetectInput::PerSensor,
                    _ => {
                        return Err(Error::config(format!(
                            "detect_input must be merged or per_sensor, got '{value}'"
                        )))
                    }
                };
            }
            "ransac_distance_m" => self.ransac_distance_m = num(key, value)?,
            "ransac_samples" => self.ransac_samples = int(key, value)? as usize,
            "ransac_iters" => self.ransac_iters = int(key, value)? as usize,
            "ransac_passes" => self.ransac_passes = int(key, value)? as usize,
            "dbscan_eps_m" => self.dbscan_eps_m = num(key, value)?,
            "dbscan_min_pts" => self.dbscan_min_pts = int(key, value)? as usize,
            "size_length_min_m" => self.size_length_min_m = num(key, value)?,
            "size_length_max_m" => self.size_length_max_m = num(key, value)?,
            "size_width_min_m" => self.size_width_min_m = num(key, value)?,
            "size_width_max_m" => self.size_width_max_m = num(key, value)?,
            "size_height_min_m" => self.size_height_min_m = num(key, value)?,
            "size_height_max_m" => self.size_height_max_m = num(key, value)?,
            "dedupe_threshold_m" => self.dedupe_threshold_m = num(key, value)?,
            "min_green_s" => self.min_green_s = num(key, value)?,
            "yellow_s" => self.yellow_s = num(key, value)?,
            "all_red_s" => self.all_red_s = num(key, value)?,
            "decision_period_s" => self.decision_period_s = num(key, value)?,
            "staleness_limit_s" => self.staleness_limit_s = num(key, value)?,
            "upstream_window_m" => self.upstream_window_m = num(key, value)?,
            "downstream_window_m" => self.downstream_window_m = num(key, value)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// The resolved configuration as parseable text (fixed key order).
    pub fn to_config_string(&self) -> String {
        let mut s = String::from("# coopsense scenario\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("mode", self.mode.label().to_string());
        kv("seed", self.seed.to_string());
        kv("duration_s", fmt_f64(self.duration_s));
        kv("warmup_s", fmt_f64(self.warmup_s));
        kv("dt_s", fmt_f64(self.dt_s));
        kv("main_volume_vphpl", fmt_f64(self.main_volume_vphpl));
        kv("side_volume_vphpl", fmt_f64(self.side_volume_vphpl));
        kv("cav_rate", fmt_f64(self.cav_rate));
        kv("cv_rate", fmt_f64(self.cv_rate));
        kv("side_left_ratio", fmt_f64(self.side_left_ratio));
        kv("cv_noise_sigma_m", fmt_f64(self.cv_noise_sigma_m));
        kv("v_free_mps", fmt_f64(self.v_free_mps));
        kv("a_max_mps2", fmt_f64(self.a_max_mps2));
        kv("b_max_mps2", fmt_f64(self.b_max_mps2));
        kv("min_gap_m", fmt_f64(self.min_gap_m));
        kv("headway_s", fmt_f64(self.headway_s));
        kv("veh_length_m", fmt_f64(self.veh_length_m));
        kv("veh_width_m", fmt_f64(self.veh_width_m));
        kv("veh_height_m", fmt_f64(self.veh_height_m));
        kv("lane_width_m", fmt_f64(self.lane_width_m));
        kv("upstream_m", fmt_f64(self.upstream_m));
        kv("downstream_m", fmt_f64(self.downstream_m));
        kv("clutter", self.clutter.to_string());
        kv("infra_lidar", self.infra_lidar.to_string());
        kv("infra_height_m", fmt_f64(self.infra_height_m));
        kv("cav_lidar_height_m", fmt_f64(self.cav_lidar_height_m));
        kv("lidar_channels", self.lidar_channels.to_string());
        kv("lidar_vfov_min_deg", fmt_f64(self.lidar_vfov_min_deg));
        kv("lidar_vfov_max_deg", fmt_f64(self.lidar_vfov_max_deg));
        kv("lidar_azimuth_step_deg", fmt_f64(self.lidar_azimuth_step_deg));
        kv("lidar_max_range_m", fmt_f64(self.lidar_max_range_m));
        kv("lidar_noise_sigma_m", fmt_f64(self.lidar_noise_sigma_m));
        kv(
            "detect_input",
            match self.detect_input {
                DetectInput::Merged => "merged".to_string(),
                DetectInput::PerSensor => "per_sensor".to_string(),
            },
        );
        kv("ransac_distance_m", fmt_f64(self.ransac_distance_m));
        kv("ransac_samples", self.ransac_samples.to_string());
        kv("ransac_iters", self.ransac_iters.to_string());
        kv("ransac_passes", self.ransac_passes.to_string());
        kv("dbscan_eps_m", fmt_f64(self.dbscan_eps_m));
        kv("dbscan_min_pts", self.dbscan_min_pts.to_string());
        kv("size_length_min_m", fmt_f64(self.size_length_min_m));
        kv("size_length_max_m", fmt_f64(self.size_length_max_m));
        kv("size_width_min_m", fmt_f64(self.size_width_min_m));
        kv("size_width_max_m", fmt_f64(self.size_width_max_m));
        kv("size_height_min_m", fmt_f64(self.size_height_min_m));
        kv("size_height_max_m", fmt_f64(self.size_height_max_m));
        kv("dedupe_threshold_m", fmt_f64(self.dedupe_threshold_m));
        kv("min_green_s", fmt_f64(self.min_green_s));
        kv("yellow_s", fmt_f64(self.yellow_s));
        kv("all_red_s", fmt_f64(self.all_red_s));
        kv("decision_period_s", fmt_f64(self.decision_period_s));
        kv("staleness_limit_s", fmt_f64(self.staleness_limit_s));
        kv("upstream_window_m", fmt_f64(self.upstream_window_m));
        kv("downstream_window_m", fmt_f64(self.downstream_window_m));
        s
    }

    /// Reject inconsistent configs before any simulation starts.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0 && self.dt_s <= 1.0) {
            return Err(Error::config("dt_s must be in (0, 1]"));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::config("duration_s must be > 0"));
        }
        if self.warmup_s < 0.0 || self.warmup_s >= self.duration_s {
            return Err(Error::config("warmup_s must be in [0, duration_s)"));
        }
        for (name, r) in [
            ("cav_rate", self.cav_rate),
            ("cv_rate", self.cv_rate),
            ("side_left_ratio", self.side_left_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.cav_rate + self.cv_rate > 1.0 + 1e-12 {
            return Err(Error::config("cav_rate + cv_rate must be <= 1"));
        }
        match self.mode {
            Mode::Coop => {
                if !self.infra_lidar {
                    return Err(Error::config(
                        "coop mode requires the infrastructure lidar (infra_lidar = true)",
                    ));
                }
            }
            Mode::Cv => {
                if self.infra_lidar {
                    return Err(Error::config(
                        "cv mode forbids sensor simulation; set infra_lidar = false",
                    ));
                }
                if self.cav_rate > 0.0 {
                    return Err(Error::config("cv mode forbids CAVs; set cav_rate = 0"));
                }
            }
            Mode::Oracle => {}
        }
        self.detector_config().validate()?;
        // Controller timing must align to the tick grid.
        crate::control::Controller::new(
            crate::traffic::RoadNetwork::t_intersection(
                self.lane_width_m,
                self.upstream_m,
                self.downstream_m,
                false,
            )?
            .phases,
            self.controller_config(),
            self.dt_s,
        )?;
        Ok(())
    }

    pub fn ticks(&self) -> u64 {
        (self.duration_s / self.dt_s).round() as u64
    }

    pub fn warmup_ticks(&self) -> u64 {
        (self.warmup_s / self.dt_s).round() as u64
    }

    pub fn driver_params(&self) -> DriverParams {
        DriverParams {
            v_free: self.v_free_mps,
            a_max: self.a_max_mps2,
            b_max: self.b_max_mps2,
            min_gap: self.min_gap_m,
            headway: self.headway_s,
        }
    }

    pub fn vehicle_dims(&self) -> VehicleDims {
        VehicleDims {
            length: self.veh_length_m,
            width: self.veh_width_m,
            height: self.veh_height_m,
        }
    }

    pub fn spawn_settings(&self) -> SpawnSettings {
        SpawnSettings {
            main_volume_vphpl: self.main_volume_vphpl,
            side_volume_vphpl: self.side_volume_vphpl,
            cav_rate: self.cav_rate,
            cv_rate: self.cv_rate,
            side_left_ratio: self.side_left_ratio,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            ransac_distance: self.ransac_distance_m,
            ransac_sample: self.ransac_samples,
            ransac_iters: self.ransac_iters,
            ransac_passes: self.ransac_passes,
            dbscan_eps: self.dbscan_eps_m,
            dbscan_min_pts: self.dbscan_min_pts,
            bounds: SizeBounds {
                length: (self.size_length_min_m, self.size_length_max_m),
                width: (self.size_width_min_m, self.size_width_max_m),
                height: (self.size_height_min_m, self.size_height_max_m),
            },
        }
    }

    pub fn controller_config(&self) -> crate::control::ControllerConfig {
        crate::control::ControllerConfig {
            min_green: self.min_green_s,
            yellow: self.yellow_s,
            all_red: self.all_red_s,
            decision_period: self.decision_period_s,
            upstream_window: self.upstream_window_m,
            downstream_window: self.downstream_window_m,
            staleness_limit: self.staleness_limit_s,
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that parses back exactly.
    let s = format!("{v}");
    s
}
