//! Ground-truth arc/seafloor intersection by dense angular sweep plus
//! bisection. Used by the simulator and by draping; the reconstruction
//! stage has its own gradient-descent search and never calls this.

use crate::geometry::{isotemporal_point, Pose, SonarGeometry, Vec3};
use crate::heightfield::HeightField;

/// Angular sweep step.
pub const SWEEP_STEP: f64 = 0.05 * std::f64::consts::PI / 180.0;
/// Bisection stops once the bracket is narrower than this (radians).
pub const BISECTION_TOL: f64 = 1e-6;

/// Signed vertical distance `terrain(p) - p_z` of the arc point at `grazing`;
/// `None` off the grid.
pub fn vertical_gap(field: &HeightField, pose: &Pose, geom: &SonarGeometry, range: f64, grazing: f64) -> Option<(f64, Vec3)> {
    let p = isotemporal_point(pose, geom, range, grazing);
    field.height_at(p.x, p.y).map(|h| (h - p.z, p))
}

/// All sign changes of the vertical gap over `[lo, hi]`, refined to [`BISECTION_TOL`].
pub fn arc_crossings(field: &HeightField, pose: &Pose, geom: &SonarGeometry, range: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = ((hi - lo) / SWEEP_STEP).ceil().max(1.0) as usize;
    let angle = |i: usize| if i == n { hi } else { lo + i as f64 * SWEEP_STEP };
    let mut out = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..=n {
        let t = angle(i);
        let cur = vertical_gap(field, pose, geom, range, t).map(|(d, _)| (t, d));
        if let (Some((t0, d0)), Some((t1, d1))) = (prev, cur) {
            if d0 == 0.0 {
                out.push(t0);
            } else if d0.signum() != d1.signum() && d1 != 0.0 {
                out.push(bisect(field, pose, geom, range, (t0, d0), t1));
            }
        }
        prev = cur;
    }
    if let Some((t, d)) = prev {
        if d == 0.0 {
            out.push(t);
        }
    }
    out
}

fn bisect(field: &HeightField, pose: &Pose, geom: &SonarGeometry, range: f64, (mut a, mut da): (f64, f64), mut b: f64) -> f64 {
    while b - a > BISECTION_TOL {
        let m = 0.5 * (a + b);
        match vertical_gap(field, pose, geom, range, m) {
            Some((0.0, _)) => return m,
            Some((dm, _)) if dm.signum() == da.signum() => {
                a = m;
                da = dm;
            }
            Some(_) => b = m,
            None => break,
        }
    }
    0.5 * (a + b)
}

/// Crossing closest in angle to the beam center, searched over `[lo, hi]`.
pub fn nearest_crossing(field: &HeightField, pose: &Pose, geom: &SonarGeometry, range: f64, lo: f64, hi: f64) -> Option<f64> {
    arc_crossings(field, pose, geom, range, lo, hi)
        .into_iter()
        .min_by(|a, b| (a - geom.tilt).abs().total_cmp(&(b - geom.tilt).abs()))
}

/// Whether terrain blocks the straight ray from the sensor to `target`
/// before the last `margin` meters.
pub fn is_occluded(field: &HeightField, origin: Vec3, target: Vec3, step: f64, margin: f64) -> bool {
    let d = target - origin;
    let len = d.norm();
    if len <= margin {
        return false;
    }
    let dir = d * (1.0 / len);
    let n = ((len - margin) / step).ceil() as usize;
    (1..=n).any(|i| {
        let t = (i as f64 * step).min(len - margin);
        let p = origin + dir * t;
        matches!(field.height_at(p.x, p.y), Some(h) if h >= p.z)
    })
}
