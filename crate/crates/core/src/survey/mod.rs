//! Lawnmower survey planning and forward simulation of sidescan pings and
//! altimeter readings over a reference seafloor.
//!
//! Intensity follows `K·cos²(ι)`, where `ι` is the incidence angle between
//! the ray and the seafloor normal, both projected into the sonar's lateral
//! plane. Bins whose seafloor crossing is hidden behind nearer terrain, faces
//! away from the ray, or lies outside the beam gate are invalid.

pub mod crossing;
pub mod io;

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{isotemporal_point, projected_normal_from_gradient, Normal2, Pose, Side, SonarGeometry, Vec3};
use crate::heightfield::HeightField;
use crate::par;

pub use io::{read_survey, write_survey};

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub intensity: f64,
    /// False for water column, nadir, shadow and bins without a seafloor crossing.
    pub valid: bool,
}

impl Bin {
    pub fn invalid(intensity: f64) -> Self {
        Self { intensity, valid: false }
    }
}

/// One head's recording of one transmitted pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct Ping {
    /// Index of the physical ping; port and starboard records share it.
    pub index: usize,
    pub pose: Pose,
    pub geom: SonarGeometry,
    pub first_range: f64,
    pub resolution: f64,
    pub bins: Vec<Bin>,
}

impl Ping {
    pub fn range(&self, bin: usize) -> f64 {
        self.first_range + bin as f64 * self.resolution
    }

    pub fn side(&self) -> Side {
        self.geom.side
    }
}

/// Seafloor point directly beneath the vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltimeterReading {
    pub point: Vec3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurveyLine {
    pub index: usize,
    /// Port and starboard records in ping order.
    pub pings: Vec<Ping>,
    pub altimeter: Vec<AltimeterReading>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Survey {
    pub lines: Vec<SurveyLine>,
}

impl Survey {
    pub fn pings(&self) -> impl Iterator<Item = &Ping> {
        self.lines.iter().flat_map(|l| l.pings.iter())
    }

    pub fn altimeter(&self) -> impl Iterator<Item = &AltimeterReading> {
        self.lines.iter().flat_map(|l| l.altimeter.iter())
    }

    pub fn ping_count(&self) -> usize {
        self.lines.iter().map(|l| l.pings.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyConfig {
    pub line_spacing: f64,
    /// Yaw of the first line set, radians.
    pub heading: f64,
    pub ping_spacing: f64,
    /// Lines per set; `None` fits as many as the extent allows.
    pub lines_per_set: Option<usize>,
    /// Adds a second set rotated by 90°.
    pub crossing: bool,
    /// Vehicle z in the world frame (negative below the surface).
    pub sonar_depth: f64,
    pub max_range: f64,
    pub first_range: f64,
    pub bin_resolution: f64,
    pub tilt: f64,
    pub beam_width: f64,
    pub horizontal_beam_width: f64,
    pub gain: f64,
    /// Standard deviation of the multiplicative intensity noise.
    pub intensity_noise: f64,
    pub altimeter_noise: f64,
    /// Intensity of bins without a seafloor return, as a fraction of the gain.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self {
            line_spacing: 7.0,
            heading: 0.0,
            ping_spacing: 2.0,
            lines_per_set: Some(6),
            crossing: true,
            sonar_depth: -10.0,
            max_range: 18.0,
            first_range: 0.25,
            bin_resolution: 0.25,
            tilt: 30f64.to_radians(),
            beam_width: 40f64.to_radians(),
            horizontal_beam_width: 0.1f64.to_radians(),
            gain: 1.0,
            intensity_noise: 0.0,
            altimeter_noise: 0.0,
            noise_floor: 0.01,
            seed: 0,
        }
    }
}

impl SurveyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("line_spacing", self.line_spacing),
            ("ping_spacing", self.ping_spacing),
            ("max_range", self.max_range),
            ("bin_resolution", self.bin_resolution),
            ("gain", self.gain),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.first_range > 0.0 && self.first_range < self.max_range) {
            return Err(Error::invalid("first_range must lie in (0, max_range)"));
        }
        if !(self.intensity_noise >= 0.0 && self.altimeter_noise >= 0.0 && self.noise_floor >= 0.0) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if self.lines_per_set == Some(0) {
            return Err(Error::invalid("lines_per_set must be positive"));
        }
        self.geometry(Side::Starboard).map(|_| ())
    }

    pub fn geometry(&self, side: Side) -> Result<SonarGeometry> {
        SonarGeometry::new(self.tilt, self.beam_width, self.horizontal_beam_width, side)
    }

    pub fn bins_per_ping(&self) -> usize {
        ((self.max_range - self.first_range) / self.bin_resolution).floor() as usize + 1
    }
}

/// Poses of one planned survey line.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedLine {
    pub index: usize,
    pub poses: Vec<Pose>,
}

/// Parallel lines across the extent `(xmin, ymin, xmax, ymax)`, alternating
/// direction, optionally followed by a perpendicular set.
pub fn plan_lawnmower(cfg: &SurveyConfig, extent: (f64, f64, f64, f64)) -> Result<Vec<PlannedLine>> {
    cfg.validate()?;
    let mut headings = vec![cfg.heading];
    if cfg.crossing {
        headings.push(cfg.heading + FRAC_PI_2);
    }
    let (xmin, ymin, xmax, ymax) = extent;
    let corners = [(xmin, ymin), (xmax, ymin), (xmin, ymax), (xmax, ymax)];
    let (cx, cy) = (0.5 * (xmin + xmax), 0.5 * (ymin + ymax));
    let mut lines = Vec::new();
    for heading in headings {
        let (u, v) = ((heading.cos(), heading.sin()), (-heading.sin(), heading.cos()));
        let proj = |d: (f64, f64), p: (f64, f64)| d.0 * (p.0 - cx) + d.1 * (p.1 - cy);
        let span = |d| {
            corners.iter().map(|&p| proj(d, p)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
        };
        let (a0, a1) = span(u);
        let (c0, c1) = span(v);
        let width = c1 - c0;
        let fit = (width / cfg.line_spacing).floor() as usize;
        let count = cfg.lines_per_set.unwrap_or(fit);
        if count == 0 {
            return Err(Error::invalid("no survey line fits in the extent"));
        }
        let first = c0 + 0.5 * (width - (count - 1) as f64 * cfg.line_spacing);
        let n_pings = ((a1 - a0) / cfg.ping_spacing).floor() as usize + 1;
        for k in 0..count {
            let c = first + k as f64 * cfg.line_spacing;
            let reverse = k % 2 == 1;
            let yaw = if reverse { heading + std::f64::consts::PI } else { heading };
            let poses = (0..n_pings)
                .map(|i| {
                    let s = i as f64 * cfg.ping_spacing;
                    let a = if reverse { a1 - s } else { a0 + s };
                    let pos = Vec3::new(cx + a * u.0 + c * v.0, cy + a * u.1 + c * v.1, cfg.sonar_depth);
                    Pose::from_ypr(pos, yaw, 0.0, 0.0)
                })
                .collect();
            lines.push(PlannedLine { index: lines.len(), poses });
        }
    }
    Ok(lines)
}

/// Cosine of the incidence angle between the ray at `grazing` and the
/// lateral-plane normal; non-positive when the facet faces away from the head.
pub fn incidence_cos(side: Side, grazing: f64, normal: &Normal2) -> f64 {
    let (s, c) = grazing.sin_cos();
    -(side.lateral_sign() * c * normal.ny) + s * normal.nz
}

/// Noiseless return `K·cos²ι`, or `None` for a facet facing away from the head.
pub fn forward_intensity(gain: f64, side: Side, grazing: f64, normal: &Normal2) -> Option<f64> {
    let c = incidence_cos(side, grazing, normal);
    (c > 0.0).then_some(gain * c * c)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn noisy(rng: &mut ChaCha8Rng, v: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return v;
    }
    let e: f64 = rng.sample(StandardNormal);
    (v * (1.0 + sigma * e)).max(0.0)
}

/// Ray-march step of the occlusion test.
const OCCLUSION_STEP: f64 = 0.05;

/// Simulates one head of ping `index` at `pose`.
pub fn simulate_ping(field: &HeightField, pose: &Pose, geom: &SonarGeometry, cfg: &SurveyConfig, index: usize) -> Ping {
    let side_key = match geom.side {
        Side::Port => 0,
        Side::Starboard => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64, side_key));
    let floor = cfg.noise_floor * cfg.gain;
    let top = field.min_max().map(|(_, hi)| hi).unwrap_or(f64::NEG_INFINITY);
    let clearance = pose.position.z - top;
    let (lo, _) = geom.gate();
    let bins = (0..cfg.bins_per_ping())
        .map(|i| {
            let r = cfg.first_range + i as f64 * cfg.bin_resolution;
            if r < clearance {
                return Bin::invalid(noisy(&mut rng, floor, cfg.intensity_noise));
            }
            let Some(t) = crossing::nearest_crossing(field, pose, geom, r, lo.max(0.0), FRAC_PI_2) else {
                return Bin::invalid(noisy(&mut rng, floor, cfg.intensity_noise));
            };
            let hit = isotemporal_point(pose, geom, r, t);
            let normal = field.gradient_at(hit.x, hit.y).and_then(|(gx, gy)| projected_normal_from_gradient(gx, gy, pose).ok());
            let lit = normal.and_then(|n| forward_intensity(cfg.gain, geom.side, t, &n));
            match lit {
                Some(v) if !crossing::is_occluded(field, pose.position, hit, OCCLUSION_STEP, OCCLUSION_STEP) => Bin {
                    intensity: noisy(&mut rng, v, cfg.intensity_noise),
                    valid: geom.in_gate(t),
                },
                _ => Bin::invalid(noisy(&mut rng, floor, cfg.intensity_noise)),
            }
        })
        .collect();
    Ping { index, pose: *pose, geom: *geom, first_range: cfg.first_range, resolution: cfg.bin_resolution, bins }
}

/// Seafloor point under the vehicle with optional vertical noise; `None` off the grid.
pub fn simulate_altimeter(field: &HeightField, pose: &Pose, cfg: &SurveyConfig, index: usize) -> Option<AltimeterReading> {
    let (x, y) = (pose.position.x, pose.position.y);
    let z = field.height_at(x, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64, 2));
    let dz = if cfg.altimeter_noise > 0.0 { cfg.altimeter_noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
    Some(AltimeterReading { point: Vec3::new(x, y, z + dz) })
}

/// Plans and simulates a full survey over `field`.
pub fn simulate_survey(field: &HeightField, cfg: &SurveyConfig) -> Result<Survey> {
    let planned = plan_lawnmower(cfg, field.extent())?;
    let port = cfg.geometry(Side::Port)?;
    let starboard = cfg.geometry(Side::Starboard)?;

    let mut jobs = Vec::new();
    let mut next = 0;
    for line in &planned {
        for pose in &line.poses {
            jobs.push((line.index, next, *pose));
            next += 1;
        }
    }
    let pings = par::map_slice(&jobs, |&(_, k, pose)| {
        (
            simulate_ping(field, &pose, &port, cfg, k),
            simulate_ping(field, &pose, &starboard, cfg, k),
            simulate_altimeter(field, &pose, cfg, k),
        )
    });

    let mut lines: Vec<SurveyLine> = planned.iter().map(|l| SurveyLine { index: l.index, ..Default::default() }).collect();
    let mut truncated = 0usize;
    for (&(li, _, pose), (p, s, alt)) in jobs.iter().zip(pings) {
        for side in [&p, &s] {
            let far = isotemporal_point(&pose, &side.geom, cfg.max_range, side.geom.tilt);
            if !field.contains(far.x, far.y) {
                truncated += 1;
            }
        }
        let line = &mut lines[li];
        line.pings.push(p);
        line.pings.push(s);
        line.altimeter.extend(alt);
    }
    if truncated > 0 {
        log::warn!("{truncated} ping records reach beyond the grid; coverage is truncated there");
    }
    Ok(Survey { lines })
}
