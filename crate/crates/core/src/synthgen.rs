//! Synthetic GCT and vehicle flows with a planted relation.
//!
//! Per segment `s` and interval `t`:
//!
//! ```text
//! v_s(t) = round(scale_s * profile(t) * weekday(t) * F(t) * (1 + obs * e))
//! p_s(t) = ped * w_s * midday(t) * P_s(t)
//! g_s(t) = round(a_s * v_s(t) + p_s(t) + obs * (a_s * v_s(t) + p_s(t)) * e')
//! ```
//!
//! `F` is a citywide traffic fluctuation shared by every segment and `P_s` a
//! per-segment pedestrian fluctuation, both smooth log-normal AR(1) series
//! restarted each day. Cameras observe `v` on the first `M` segments.

use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::flowdata::{CameraMapping, DayWindow, FlowKind, FlowMatrix, RoadSegment};
use crate::numcore::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseProfile {
    CommutePeaked,
    MiddayPeaked,
    Flat,
}

impl FromStr for BaseProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "commute-peaked" => Ok(BaseProfile::CommutePeaked),
            "midday-peaked" => Ok(BaseProfile::MiddayPeaked),
            "flat" => Ok(BaseProfile::Flat),
            other => Err(Error::Unknown {
                kind: "base profile",
                name: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for BaseProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseProfile::CommutePeaked => "commute-peaked",
            BaseProfile::MiddayPeaked => "midday-peaked",
            BaseProfile::Flat => "flat",
        })
    }
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    (-((h - center) / width).powi(2)).exp()
}

impl BaseProfile {
    /// Relative level at fractional hour `h`.
    pub fn at(&self, h: f64) -> f64 {
        match self {
            BaseProfile::CommutePeaked => 0.45 + 0.9 * bump(h, 8.0, 1.3) + 0.8 * bump(h, 17.5, 1.4),
            BaseProfile::MiddayPeaked => 0.5 + 0.8 * bump(h, 12.5, 2.5),
            BaseProfile::Flat => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub m_cameras: usize,
    pub days: usize,
    pub interval_minutes: u32,
    pub base_profile: BaseProfile,
    /// Range of the GCT-per-vehicle ratio `a_s`; equal bounds fix it.
    pub vehicle_scale: (f64, f64),
    /// Range of the per-segment vehicle level `scale_s`.
    pub vehicle_level: (f64, f64),
    /// Pedestrian amplitude in counts; zero removes the component.
    pub pedestrian_noise_std: f64,
    /// Relative observation noise on both flows.
    pub observation_noise_std: f64,
    /// Log-scale std of the shared traffic fluctuation.
    pub traffic_fluctuation_std: f64,
    /// Log-scale std of the per-segment pedestrian fluctuation.
    pub pedestrian_fluctuation_std: f64,
    /// Lag-one autocorrelation of both fluctuations.
    pub fluctuation_rho: f64,
    pub weekend_factor: f64,
    pub start_date: NaiveDate,
    pub day_window: DayWindow,
    pub segment_spacing_m: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 12,
            m_cameras: 4,
            days: 14,
            interval_minutes: 5,
            base_profile: BaseProfile::CommutePeaked,
            vehicle_scale: (0.3, 0.4),
            vehicle_level: (150.0, 350.0),
            pedestrian_noise_std: 40.0,
            observation_noise_std: 0.03,
            traffic_fluctuation_std: 0.15,
            pedestrian_fluctuation_std: 0.5,
            fluctuation_rho: 0.97,
            weekend_factor: 0.85,
            start_date: NaiveDate::from_ymd_opt(2022, 8, 28).unwrap(),
            day_window: DayWindow::default(),
            segment_spacing_m: 400.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// All noise and fluctuation off and `a_s = ratio` everywhere.
    pub fn noiseless(ratio: f64) -> Self {
        SynthConfig {
            vehicle_scale: (ratio, ratio),
            pedestrian_noise_std: 0.0,
            observation_noise_std: 0.0,
            traffic_fluctuation_std: 0.0,
            pedestrian_fluctuation_std: 0.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.n_nodes > self.m_cameras && self.m_cameras >= 2) {
            return fail(format!("need N > M >= 2, got N={} M={}", self.n_nodes, self.m_cameras));
        }
        if self.days == 0 {
            return fail("days must be positive".into());
        }
        self.day_window.intervals(self.interval_minutes)?;
        let stds = [
            self.pedestrian_noise_std,
            self.observation_noise_std,
            self.traffic_fluctuation_std,
            self.pedestrian_fluctuation_std,
        ];
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return fail("noise standard deviations must be non-negative".into());
        }
        let ranges = [self.vehicle_scale, self.vehicle_level];
        if ranges.iter().any(|(lo, hi)| !(*lo > 0.0 && lo <= hi)) {
            return fail("vehicle_scale and vehicle_level need 0 < min <= max".into());
        }
        if !(0.0..1.0).contains(&self.fluctuation_rho) || !(self.weekend_factor > 0.0) {
            return fail("fluctuation_rho must be in [0, 1) and weekend_factor positive".into());
        }
        if !(self.segment_spacing_m > 0.0) {
            return fail("segment_spacing_m must be positive".into());
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        let range = |key: &str, cur: (f64, f64)| -> Result<(f64, f64)> {
            match kv.get_list::<f64>(key)? {
                None => Ok(cur),
                Some(v) if v.len() == 1 => Ok((v[0], v[0])),
                Some(v) if v.len() == 2 => Ok((v[0], v[1])),
                Some(_) => Err(Error::Config(format!("`{key}` takes one value or a min,max pair"))),
            }
        };
        self.n_nodes = kv.get_or("n_nodes", self.n_nodes)?;
        self.m_cameras = kv.get_or("m_cameras", self.m_cameras)?;
        self.days = kv.get_or("days", self.days)?;
        self.interval_minutes = kv.get_or("interval_minutes", self.interval_minutes)?;
        self.base_profile = kv.get_or("base_profile", self.base_profile)?;
        self.vehicle_scale = range("vehicle_scale", self.vehicle_scale)?;
        self.vehicle_level = range("vehicle_level", self.vehicle_level)?;
        self.pedestrian_noise_std = kv.get_or("pedestrian_noise_std", self.pedestrian_noise_std)?;
        self.observation_noise_std = kv.get_or("observation_noise_std", self.observation_noise_std)?;
        self.traffic_fluctuation_std = kv.get_or("traffic_fluctuation_std", self.traffic_fluctuation_std)?;
        self.pedestrian_fluctuation_std = kv.get_or("pedestrian_fluctuation_std", self.pedestrian_fluctuation_std)?;
        self.fluctuation_rho = kv.get_or("fluctuation_rho", self.fluctuation_rho)?;
        self.weekend_factor = kv.get_or("weekend_factor", self.weekend_factor)?;
        if let Some(d) = kv.raw("start_date") {
            self.start_date = NaiveDate::parse_from_str(d, "%Y-%m-%d")
                .map_err(|_| Error::Config(format!("bad start_date `{d}`")))?;
        }
        if let (Some(s), Some(e)) = (kv.raw("day_start"), kv.raw("day_end")) {
            self.day_window = DayWindow::parse(s, e)?;
        }
        self.segment_spacing_m = kv.get_or("segment_spacing_m", self.segment_spacing_m)?;
        self.seed = kv.get_or("seed", self.seed)?;
        self.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub gct: FlowMatrix,
    pub veh: FlowMatrix,
    pub mapping: CameraMapping,
    pub segments: Vec<RoadSegment>,
    /// Planted `a_s` per segment.
    pub gct_ratio: Vec<f64>,
}

struct Ar1 {
    rho: f64,
    state: f64,
}

impl Ar1 {
    fn start(rho: f64, rng: &mut SeededRng) -> Self {
        Ar1 { rho, state: rng.normal() }
    }

    /// Stationary unit-variance step.
    fn next(&mut self, rng: &mut SeededRng) -> f64 {
        let v = self.state;
        self.state = self.rho * self.state + (1.0 - self.rho * self.rho).sqrt() * rng.normal();
        v
    }
}

/// Mean-one log-normal factor.
fn lognormal(u: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        1.0
    } else {
        (sigma * u - 0.5 * sigma * sigma).exp()
    }
}

/// Segments on a square-ish grid `spacing` metres apart, ids `1..=n`.
fn grid_segments(n: usize, spacing: f64) -> Vec<RoadSegment> {
    const M_PER_DEG: f64 = 111_320.0;
    let (lat0, lon0) = (24.78, 121.0);
    let cols = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            let lat = lat0 + r * spacing / M_PER_DEG;
            let lon = lon0 + c * spacing / (M_PER_DEG * lat0.to_radians().cos());
            RoadSegment::new(i as u32 + 1, lat, lon)
        })
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let c = config;
    let n = c.n_nodes;
    let per_day = c.day_window.intervals(c.interval_minutes)?;
    let root = SeededRng::new(c.seed);
    let mut node_rng = root.fork(0);
    let draw = |rng: &mut SeededRng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.uniform_in(lo, hi) };
    let level: Vec<f64> = (0..n).map(|_| draw(&mut node_rng, c.vehicle_level)).collect();
    let ratio: Vec<f64> = (0..n).map(|_| draw(&mut node_rng, c.vehicle_scale)).collect();
    let ped_weight: Vec<f64> = (0..n).map(|_| node_rng.uniform_in(0.8, 1.2)).collect();

    let mut traffic_rng = root.fork(1);
    let mut ped_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let mut times = Vec::with_capacity(c.days * per_day);
    let mut gct = Vec::with_capacity(c.days * per_day * n);
    let mut veh = Vec::with_capacity(c.days * per_day * c.m_cameras);
    let step = Duration::minutes(c.interval_minutes as i64);
    for d in 0..c.days {
        let date = c.start_date + Duration::days(d as i64);
        let weekday = match date.weekday() {
            Weekday::Sat | Weekday::Sun => c.weekend_factor,
            _ => 1.0,
        };
        let mut traffic = Ar1::start(c.fluctuation_rho, &mut traffic_rng);
        let mut peds: Vec<Ar1> = (0..n).map(|_| Ar1::start(c.fluctuation_rho, &mut ped_rng)).collect();
        let start = NaiveDateTime::new(date, c.day_window.start);
        for k in 0..per_day {
            let t = start + step * k as i32;
            // profile evaluated at the interval midpoint
            let hour = (t - NaiveDateTime::new(date, chrono::NaiveTime::MIN)).num_minutes() as f64 / 60.0
                + c.interval_minutes as f64 / 120.0;
            let f = lognormal(traffic.next(&mut traffic_rng), c.traffic_fluctuation_std);
            let base = c.base_profile.at(hour) * weekday * f;
            let mid = BaseProfile::MiddayPeaked.at(hour);
            for s in 0..n {
                let e = if c.observation_noise_std > 0.0 { noise_rng.normal() } else { 0.0 };
                let v = (level[s] * base * (1.0 + c.observation_noise_std * e)).round().max(0.0);
                let pu = peds[s].next(&mut ped_rng);
                let p = c.pedestrian_noise_std * ped_weight[s] * mid * lognormal(pu, c.pedestrian_fluctuation_std);
                let clean = ratio[s] * v + p;
                let e2 = if c.observation_noise_std > 0.0 { noise_rng.normal() } else { 0.0 };
                gct.push(Some((clean * (1.0 + c.observation_noise_std * e2)).round().max(0.0)));
                if s < c.m_cameras {
                    veh.push(Some(v));
                }
            }
            times.push(t);
        }
    }
    let segments = grid_segments(n, c.segment_spacing_m);
    let seg_ids: Vec<String> = segments.iter().map(|s| s.segment_id.to_string()).collect();
    let cams: Vec<String> = (1..=c.m_cameras).map(|i| format!("Cam{i}")).collect();
    let mapping = CameraMapping::new(cams.iter().cloned().zip(seg_ids.iter().cloned()).collect())?;
    Ok(SynthData {
        gct: FlowMatrix::new(times.clone(), seg_ids, gct, c.interval_minutes, FlowKind::Gct)?,
        veh: FlowMatrix::new(times, cams, veh, c.interval_minutes, FlowKind::Vehicle)?,
        mapping,
        segments,
        gct_ratio: ratio,
    })
}
