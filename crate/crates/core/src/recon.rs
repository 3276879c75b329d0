//! Bathymetry reconstruction: fit a SIREN height function to estimated
//! lateral normals along each ping and to altimeter heights.
//!
//! For each bin, the seafloor crossing of its isotemporal arc is located on
//! the current surface by a fixed number of descent steps on the squared
//! vertical gap; the surface normal there, projected into the ping's lateral
//! plane, is compared with the estimate. The crossing angle is held constant
//! while differentiating the loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, LrSchedule, Scaling, SirenModel, SirenVars, Tape, Tensor, Var};
use crate::draping::{detect_first_bottom_return, DrapedSurvey, BOTTOM_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::{isotemporal_point, isotemporal_tangent, Mat3, Normal2, Pose, SonarGeometry, Vec3};
use crate::heightfield::HeightField;
use crate::par;
use crate::survey::{Ping, Survey};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconConfig {
    pub depth: usize,
    pub width: usize,
    pub first_omega: f64,
    pub epochs: usize,
    pub batch_pings: usize,
    pub altimeter_batch: usize,
    /// Descent steps of the crossing search.
    pub n_steps: usize,
    /// Crossing-search step size λ (m·rad); each step is scaled by `1/r`.
    pub step_size: f64,
    /// Weight of the altimeter term.
    pub height_weight: f64,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            width: 64,
            first_omega: 30.0,
            epochs: 300,
            batch_pings: 64,
            altimeter_batch: 2000,
            n_steps: 10,
            step_size: 0.05,
            height_weight: 10.0,
            learning_rate: 2e-4,
            lr_decay: 0.995,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(self.height_weight >= 0.0) {
            return Err(Error::invalid("height weight must be non-negative"));
        }
        if !(self.step_size > 0.0 && self.learning_rate >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::invalid("step size, learning rate and decay must be positive"));
        }
        if self.epochs == 0 || self.batch_pings == 0 || self.width == 0 || self.depth < 2 {
            return Err(Error::invalid("epochs, batch size, width must be positive and depth at least 2"));
        }
        Ok(())
    }
}

/// `Φ(p_x, p_y) − p_z` in meters; positive when `p` lies below the surface.
pub fn signed_vertical_distance(model: &SirenModel, p: Vec3) -> f64 {
    model.height(p.x, p.y) - p.z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingResult {
    pub theta: f64,
    pub point: Vec3,
    /// Angle inside the beam gate and point inside the model's domain.
    pub valid: bool,
}

/// One isotemporal arc to search.
#[derive(Debug, Clone, Copy)]
pub struct ArcQuery {
    pub pose: Pose,
    pub geom: SonarGeometry,
    pub range: f64,
}

/// Fixed-step descent on `Δ²` along each arc, starting at the beam center:
/// `θ ← θ − (λ/r)·d(Δ²)/dθ`.
pub fn find_crossings(model: &SirenModel, arcs: &[ArcQuery], n_steps: usize, step_size: f64) -> Vec<CrossingResult> {
    const CHUNK: usize = 256;
    let chunks: Vec<&[ArcQuery]> = arcs.chunks(CHUNK).collect();
    par::map_slice(&chunks, |c| crossings_serial(model, c, n_steps, step_size)).into_iter().flatten().collect()
}

fn crossings_serial(model: &SirenModel, arcs: &[ArcQuery], n_steps: usize, step_size: f64) -> Vec<CrossingResult> {
    let s = model.scaling;
    let mut theta: Vec<f64> = arcs.iter().map(|a| a.geom.tilt).collect();
    let mut pts = vec![[0.0; 2]; arcs.len()];
    let mut dirs = vec![[0.0; 2]; arcs.len()];
    for _ in 0..n_steps {
        let mut pz = Vec::with_capacity(arcs.len());
        let mut tz = Vec::with_capacity(arcs.len());
        for (i, a) in arcs.iter().enumerate() {
            let p = isotemporal_point(&a.pose, &a.geom, a.range, theta[i]);
            let t = isotemporal_tangent(&a.pose, &a.geom, a.range, theta[i]);
            pts[i] = s.to_normalized(p.x, p.y);
            dirs[i] = [t.x / s.x_scale, t.y / s.y_scale];
            pz.push(p.z);
            tz.push(t.z);
        }
        let (z, dz) = model.value_and_directional_batch(&pts, &dirs);
        for (i, a) in arcs.iter().enumerate() {
            let gap = s.height_to_metric(z[i]) - pz[i];
            let dgap = dz[i] * s.z_scale - tz[i];
            theta[i] -= step_size / a.range * 2.0 * gap * dgap;
        }
    }
    arcs.iter()
        .zip(theta)
        .map(|(a, t)| {
            let point = isotemporal_point(&a.pose, &a.geom, a.range, t);
            let valid = t.is_finite() && a.geom.in_gate(t) && s.in_domain(point.x, point.y, 0.0);
            CrossingResult { theta: t, point, valid }
        })
        .collect()
}

pub fn find_crossing(model: &SirenModel, pose: &Pose, geom: &SonarGeometry, range: f64, cfg: &ReconConfig) -> CrossingResult {
    find_crossings(model, &[ArcQuery { pose: *pose, geom: *geom, range }], cfg.n_steps, cfg.step_size)[0]
}

/// Mean absolute vertical distance of altimeter points to the surface.
pub fn height_loss(model: &SirenModel, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty { what: "altimeter batch" });
    }
    let xy: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
    let h = model.heights(&xy);
    Ok(h.iter().zip(points).map(|(h, p)| (h - p.z).abs()).sum::<f64>() / points.len() as f64)
}

/// A normal constraint at a found crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalSample {
    pub point: Vec3,
    /// Sonar-to-world rotation of the ping.
    pub rotation: Mat3,
    pub target: Normal2,
}

/// Mean of `‖N_model − N_target‖` over samples, without recording a tape.
pub fn normal_loss(model: &SirenModel, samples: &[NormalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty { what: "normal samples" });
    }
    let mut sum = 0.0;
    for s in samples {
        let (gx, gy) = model.metric_gradient(s.point.x, s.point.y);
        let r = &s.rotation.0;
        let ny = -r[0][1] * gx - r[1][1] * gy + r[2][1];
        let nz = -r[0][2] * gx - r[1][2] * gy + r[2][2];
        let len = ny.hypot(nz);
        sum += (ny / len - s.target.ny).hypot(nz / len - s.target.nz);
    }
    Ok(sum / samples.len() as f64)
}

fn column(tape: &Tape, v: Vec<f64>) -> Var {
    tape.constant(Tensor::column(v))
}

/// Records `Σ ‖N_model − N_target‖` over `samples` and returns it (a sum, not a mean).
fn record_normal_sum(tape: &Tape, model: &SirenModel, vars: &SirenVars, samples: &[NormalSample]) -> Var {
    let s = model.scaling;
    let pts: Vec<f64> = samples.iter().flat_map(|q| s.to_normalized(q.point.x, q.point.y)).collect();
    let x = tape.constant(Tensor::from_vec(samples.len(), 2, pts).expect("shape"));
    let out = model.tape_forward(tape, vars, x, true);
    let (gx, gy) = out.gradient.expect("gradient requested");
    let (fx, fy) = s.gradient_factors();
    let (gx, gy) = (tape.scale(gx, fx), tape.scale(gy, fy));
    let rot = |i: usize, j: usize| column(tape, samples.iter().map(|q| q.rotation.0[i][j]).collect());
    // n_world = (-gx, -gy, 1); sonar components are the rotation's columns dotted with it
    let lateral = |j: usize| {
        let a = tape.mul(gx, rot(0, j));
        let b = tape.mul(gy, rot(1, j));
        tape.sub(rot(2, j), tape.add(a, b))
    };
    let (ny, nz) = (lateral(1), lateral(2));
    let len = tape.sqrt(tape.add(tape.square(ny), tape.square(nz)));
    let dy = tape.sub(tape.div(ny, len), column(tape, samples.iter().map(|q| q.target.ny).collect()));
    let dz = tape.sub(tape.div(nz, len), column(tape, samples.iter().map(|q| q.target.nz).collect()));
    tape.sum(tape.sqrt(tape.add(tape.square(dy), tape.square(dz))))
}

/// Records `Σ |Φ(p) − p_z|` in meters.
fn record_height_sum(tape: &Tape, model: &SirenModel, vars: &SirenVars, points: &[Vec3]) -> Var {
    let s = model.scaling;
    let xy: Vec<f64> = points.iter().flat_map(|p| s.to_normalized(p.x, p.y)).collect();
    let x = tape.constant(Tensor::from_vec(points.len(), 2, xy).expect("shape"));
    let z = model.tape_forward(tape, vars, x, false).z;
    let zm = tape.add_scalar(tape.scale(z, s.z_scale), s.z_offset);
    let diff = tape.sub(zm, column(tape, points.iter().map(|p| p.z).collect()));
    tape.sum(tape.abs(diff))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub normal: f64,
    pub height: f64,
    pub gradients: Vec<Tensor>,
}

/// `L = L_normal + w_H·L_height` and its parameter gradients. Empty sets
/// contribute zero. Work is split into chunks evaluated on separate tapes.
pub fn loss_and_gradients(model: &SirenModel, samples: &[NormalSample], altimeter: &[Vec3], height_weight: f64) -> Result<LossBreakdown> {
    const CHUNK: usize = 128;
    enum Job<'a> {
        Normal(&'a [NormalSample]),
        Height(&'a [Vec3]),
    }
    let mut jobs: Vec<Job> = samples.chunks(CHUNK).map(Job::Normal).collect();
    if height_weight > 0.0 {
        jobs.extend(altimeter.chunks(CHUNK * 4).map(Job::Height));
    }
    let (n_norm, n_alt) = (samples.len().max(1) as f64, altimeter.len().max(1) as f64);
    let results = par::map_slice(&jobs, |job| -> Result<(f64, f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars = model.on_tape(&tape);
        let (sum, scale, is_normal) = match job {
            Job::Normal(s) => (record_normal_sum(&tape, model, &vars, s), 1.0 / n_norm, true),
            Job::Height(p) => (record_height_sum(&tape, model, &vars, p), height_weight / n_alt, false),
        };
        let loss = tape.scale(sum, scale);
        let raw = tape.scalar(sum) / if is_normal { n_norm } else { n_alt };
        let grads = tape.backward(loss)?;
        let g = model.collect_gradients(&grads, &vars);
        Ok(if is_normal { (raw, 0.0, g) } else { (0.0, raw, g) })
    });
    let mut out = LossBreakdown {
        total: 0.0,
        normal: 0.0,
        height: 0.0,
        gradients: model.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
    };
    for r in results {
        let (n, h, g) = r?;
        out.normal += n;
        out.height += h;
        out.gradients.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b));
    }
    out.total = out.normal + height_weight * out.height;
    Ok(out)
}

/// Smallest vertical range, meters, mapped onto the network's output interval.
pub const MIN_HEIGHT_SPAN: f64 = 2.0;

/// Pings with per-bin normal estimates plus altimeter points.
#[derive(Debug, Clone, Default)]
pub struct ReconInput {
    pub pings: Vec<Ping>,
    /// Per ping, per bin; `None` excludes the bin.
    pub normals: Vec<Vec<Option<Normal2>>>,
    pub altimeter: Vec<Vec3>,
}

impl ReconInput {
    /// Pairs a survey with estimates given in [`Survey::pings`] order.
    pub fn from_estimates(survey: &Survey, normals: Vec<Vec<Option<Normal2>>>) -> Result<Self> {
        let pings: Vec<Ping> = survey.pings().cloned().collect();
        if pings.len() != normals.len() || pings.iter().zip(&normals).any(|(p, n)| p.bins.len() != n.len()) {
            return Err(Error::invalid("estimates do not match the survey's pings"));
        }
        Ok(Self { pings, normals, altimeter: survey.altimeter().map(|a| a.point).collect() })
    }

    /// Ground-truth projected normals from a draped survey.
    pub fn from_draped(d: &DrapedSurvey) -> Self {
        let mut input = ReconInput::default();
        for line in &d.lines {
            for p in &line.pings {
                input.normals.push(p.bins.iter().map(|b| b.valid.then_some(b.normal2d)).collect());
                input.pings.push(p.ping.clone());
            }
            input.altimeter.extend(line.altimeter.iter().map(|a| a.point));
        }
        input
    }

    pub fn bin_count(&self) -> usize {
        self.normals.iter().map(|n| n.iter().filter(|v| v.is_some()).count()).sum()
    }

    /// Vertical range used to normalize heights: altimeter points when
    /// present, otherwise first-bottom-return altitudes under each ping.
    /// Widened symmetrically to at least [`MIN_HEIGHT_SPAN`].
    pub fn height_bounds(&self) -> Result<(f64, f64)> {
        let zs: Vec<f64> = if self.altimeter.is_empty() {
            self.pings
                .iter()
                .filter_map(|p| detect_first_bottom_return(p, BOTTOM_THRESHOLD).ok().map(|i| p.pose.position.z - p.range(i)))
                .collect()
        } else {
            self.altimeter.iter().map(|p| p.z).collect()
        };
        if zs.is_empty() {
            return Err(Error::Empty { what: "height references" });
        }
        let lo = zs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.5 * (MIN_HEIGHT_SPAN - (hi - lo)).max(0.0);
        Ok((lo - pad, hi + pad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconLogEntry {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_normal: f64,
    pub loss_height: f64,
    pub lr: f64,
    pub valid_bin_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// Final model, or the last finite one when training diverged.
    pub model: SirenModel,
    pub log: Vec<ReconLogEntry>,
    pub diverged: Option<String>,
}

fn arcs_of(input: &ReconInput, ping_ids: &[usize]) -> (Vec<ArcQuery>, Vec<(usize, usize)>) {
    let mut arcs = Vec::new();
    let mut ids = Vec::new();
    for &k in ping_ids {
        let p = &input.pings[k];
        for (i, n) in input.normals[k].iter().enumerate() {
            if n.is_some() {
                arcs.push(ArcQuery { pose: p.pose, geom: p.geom, range: p.range(i) });
                ids.push((k, i));
            }
        }
    }
    (arcs, ids)
}

/// Crossings of every constrained bin on the current surface.
pub fn normal_samples(model: &SirenModel, input: &ReconInput, ping_ids: &[usize], cfg: &ReconConfig) -> (Vec<NormalSample>, usize) {
    let (arcs, ids) = arcs_of(input, ping_ids);
    let crossings = find_crossings(model, &arcs, cfg.n_steps, cfg.step_size);
    let samples = crossings
        .iter()
        .zip(&ids)
        .filter(|(c, _)| c.valid)
        .map(|(c, &(k, i))| NormalSample {
            point: c.point,
            rotation: input.pings[k].pose.rotation(),
            target: input.normals[k][i].expect("constrained bin"),
        })
        .collect();
    (samples, arcs.len())
}

/// Model initialized on `extent` = `(xmin, ymin, xmax, ymax)` with heights scaled from the input.
pub fn initial_model(input: &ReconInput, extent: (f64, f64, f64, f64), cfg: &ReconConfig) -> Result<SirenModel> {
    let (zlo, zhi) = input.height_bounds()?;
    let scaling = Scaling::from_bounds(extent.0, extent.2, extent.1, extent.3, zlo, zhi)?;
    Ok(SirenModel::init(cfg.depth, cfg.width, cfg.first_omega, cfg.seed)?.with_scaling(scaling))
}

/// Fits a SIREN to the input over `extent`.
pub fn optimize(input: &ReconInput, extent: (f64, f64, f64, f64), cfg: &ReconConfig) -> Result<ReconOutput> {
    optimize_from(input, initial_model(input, extent, cfg)?, cfg)
}

/// Continues fitting from `model`.
pub fn optimize_from(input: &ReconInput, mut model: SirenModel, cfg: &ReconConfig) -> Result<ReconOutput> {
    cfg.validate()?;
    if input.pings.is_empty() || input.bin_count() == 0 {
        return Err(Error::Empty { what: "constrained sidescan bins" });
    }
    if cfg.height_weight > 0.0 && input.altimeter.is_empty() {
        return Err(Error::Empty { what: "altimeter set" });
    }
    let mut adam = Adam::new(LrSchedule::ExponentialPerEpoch { initial: cfg.learning_rate, decay: cfg.lr_decay });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut order: Vec<usize> = (0..input.pings.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = adam.schedule.rate(epoch, 0);
        let (mut lt, mut ln, mut lh, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let (mut used, mut offered) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_pings) {
            let (samples, n_arcs) = normal_samples(&model, input, batch, cfg);
            offered += n_arcs;
            used += samples.len();
            if samples.is_empty() {
                log::warn!("epoch {epoch}: batch without valid crossings skipped");
                continue;
            }
            let alt: Vec<Vec3> = if cfg.height_weight > 0.0 {
                let n = cfg.altimeter_batch.min(input.altimeter.len());
                index::sample(&mut rng, input.altimeter.len(), n).into_iter().map(|i| input.altimeter[i]).collect()
            } else {
                Vec::new()
            };
            let loss = loss_and_gradients(&model, &samples, &alt, cfg.height_weight)?;
            if !loss.total.is_finite() || loss.gradients.iter().any(|g| !g.is_finite()) {
                let msg = format!("non-finite loss at epoch {epoch}; returning the last finite model");
                return Ok(ReconOutput { model, log, diverged: Some(msg) });
            }
            let prev = model.clone();
            adam.step(&mut model.params_mut(), &loss.gradients, lr)?;
            if !model.is_finite() {
                let msg = format!("non-finite parameters at epoch {epoch}; returning the last finite model");
                return Ok(ReconOutput { model: prev, log, diverged: Some(msg) });
            }
            lt += loss.total;
            ln += loss.normal;
            lh += loss.height;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let entry = ReconLogEntry {
            epoch,
            loss_total: lt / b,
            loss_normal: ln / b,
            loss_height: lh / b,
            lr,
            valid_bin_fraction: used as f64 / offered.max(1) as f64,
        };
        log::debug!("recon epoch {epoch}: {entry:?}");
        log.push(entry);
    }
    Ok(ReconOutput { model, log, diverged: None })
}

pub fn log_csv(log: &[ReconLogEntry]) -> String {
    let mut out = String::from("epoch,loss_total,loss_normal,loss_height,lr,valid_bin_fraction\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{},{},{}", e.epoch, e.loss_total, e.loss_normal, e.loss_height, e.lr, e.valid_bin_fraction);
    }
    out
}

pub fn write_log_csv(log: &[ReconLogEntry], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, log_csv(log))?;
    Ok(())
}

/// Samples the model on a node lattice.
pub fn export_bathymetry(model: &SirenModel, origin: (f64, f64), cell_size: f64, ncols: usize, nrows: usize) -> Result<HeightField> {
    let mut field = HeightField::constant(origin.0, origin.1, cell_size, ncols, nrows, 0.0)?;
    let (xmin, ymin, xmax, ymax) = field.extent();
    let tol = 1e-9;
    if !(model.scaling.in_domain(xmin, ymin, tol) && model.scaling.in_domain(xmax, ymax, tol)) {
        return Err(Error::OutOfExtent { x: if model.scaling.in_domain(xmin, ymin, tol) { xmax } else { xmin }, y: ymax });
    }
    let mut pts = Vec::with_capacity(ncols * nrows);
    for r in 0..nrows {
        for c in 0..ncols {
            let (x, y) = field.node_xy(c, r);
            pts.push([x, y]);
        }
    }
    let chunks: Vec<&[[f64; 2]]> = pts.chunks(1024).collect();
    let heights: Vec<f64> = par::map_slice(&chunks, |c| model.heights(c)).into_iter().flatten().collect();
    for r in 0..nrows {
        for c in 0..ncols {
            field.set(c, r, heights[r * ncols + c]);
        }
    }
    Ok(field)
}

/// Exports on the lattice of `like`.
pub fn export_like(model: &SirenModel, like: &HeightField) -> Result<HeightField> {
    export_bathymetry(model, like.origin(), like.cell_size(), like.ncols(), like.nrows())
}

/// Row-major mask of nodes of `like` within `radius` of any point, excluding the border.
pub fn coverage_mask(like: &HeightField, points: impl IntoIterator<Item = Vec3>, radius: f64) -> Vec<bool> {
    let (nc, nr) = (like.ncols(), like.nrows());
    let (x0, y0) = like.origin();
    let cs = like.cell_size();
    let mut mask = vec![false; nc * nr];
    let reach = (radius / cs).ceil() as isize;
    for p in points {
        let (cc, rc) = (((p.x - x0) / cs).round() as isize, ((p.y - y0) / cs).round() as isize);
        for r in (rc - reach).max(1)..=(rc + reach).min(nr as isize - 2) {
            for c in (cc - reach).max(1)..=(cc + reach).min(nc as isize - 2) {
                let (x, y) = like.node_xy(c as usize, r as usize);
                if (x - p.x).hypot(y - p.y) <= radius {
                    mask[r as usize * nc + c as usize] = true;
                }
            }
        }
    }
    mask
}
