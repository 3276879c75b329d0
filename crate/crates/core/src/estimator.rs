//! Inverse sensor models: per-bin lateral normal component from intensity.
//!
//! Estimates are expressed as the sine of the surface tilt in the lateral
//! plane, positive when the facet tilts away from the head (and therefore
//! returns less energy than flat seafloor). [`to_normal2`] converts that to the
//! sonar-frame [`Normal2`] of the ping's side.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::siren::uniform;
use crate::autodiff::{Adam, Dense, LrSchedule, Tape, Tensor, Var};
use crate::draping::{flat_prior_grazing, Window};
use crate::error::{Error, Result};
use crate::eval::{normal_metrics, NormalMetrics};
use crate::geometry::{Normal2, Side};
use crate::par;
use crate::survey::{Ping, Survey};

pub use crate::autodiff::tape::smooth_l1;

/// Closed-form inverse of `I = K·cos²ι` under a flat-seafloor grazing angle.
///
/// Of the two tilts consistent with `ι`, the one of smaller magnitude is
/// returned. `I > K` saturates to `ι = 0`.
pub fn lambertian_invert(intensity: f64, gain: f64, grazing: f64) -> Result<f64> {
    if !(grazing > 0.0 && grazing < std::f64::consts::FRAC_PI_2) {
        return Err(Error::invalid(format!("grazing angle {grazing} outside (0, π/2)")));
    }
    if !(gain > 0.0) || !(intensity >= 0.0) {
        return Err(Error::invalid("intensity must be non-negative and gain positive"));
    }
    let incidence = (intensity / gain).min(1.0).sqrt().acos();
    let tilt = incidence - (std::f64::consts::FRAC_PI_2 - grazing);
    Ok(tilt.sin())
}

/// Mean over valid pixels of `(|g| + λ_N)·smooth_l1(p − g, β)`.
pub fn normal_aware_loss(pred: &[f64], target: &[f64], mask: &[bool], beta: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::invalid("prediction, target and mask lengths differ"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid("smooth-l1 beta must be positive"));
    }
    let (sum, n) = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((&p, &g), _)| (s + crate::autodiff::normal_aware_term(p, g, beta).0, n + 1));
    if n == 0 {
        return Err(Error::Empty { what: "normal-aware loss mask" });
    }
    Ok(sum / n as f64)
}

/// Sonar-frame projected normal of a tilt sine estimated on `side`.
pub fn to_normal2(tilt_sine: f64, side: Side) -> Normal2 {
    Normal2::from_lateral(side.lateral_sign() * tilt_sine.clamp(-1.0, 1.0))
}

/// One ping as a single-row window with flat-prior geometry and no target.
pub fn ping_window(ping: &Ping, gain: f64) -> Window {
    let prior = flat_prior_grazing(ping);
    let n = ping.bins.len();
    let mask: Vec<bool> = ping.bins.iter().zip(&prior).map(|(b, g)| b.valid && g.is_some()).collect();
    Window {
        rows: 1,
        cols: n,
        intensity: ping.bins.iter().map(|b| b.intensity).collect(),
        grazing: prior.iter().map(|g| g.unwrap_or(0.0)).collect(),
        target: vec![0.0; n],
        mask,
        gain,
    }
}

pub trait NormalEstimator: Sync {
    /// Tilt sine per window pixel, `None` where the mask is off.
    fn predict_window(&self, w: &Window) -> Vec<Option<f64>>;

    /// Sonar-frame normals for every bin of `ping`; invalid bins give `None`.
    fn estimate_ping(&self, ping: &Ping, gain: f64) -> Vec<Option<Normal2>> {
        let side = ping.side();
        self.predict_window(&ping_window(ping, gain)).into_iter().map(|t| t.map(|t| to_normal2(t, side))).collect()
    }

    /// Estimates for every ping of a survey, in [`Survey::pings`] order.
    fn estimate_survey(&self, survey: &Survey, gain: f64) -> Vec<Vec<Option<Normal2>>> {
        let pings: Vec<&Ping> = survey.pings().collect();
        par::map_slice(&pings, |p| self.estimate_ping(p, gain))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Lambertian;

impl NormalEstimator for Lambertian {
    fn predict_window(&self, w: &Window) -> Vec<Option<f64>> {
        (0..w.intensity.len())
            .map(|i| {
                if !w.mask[i] {
                    return None;
                }
                lambertian_invert(w.intensity[i], w.gain, w.grazing[i]).ok()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub tv_across: f64,
    pub tv_along: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1.0, tv_across: 1e-3, tv_along: 1e-3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if !(self.tv_across >= 0.0 && self.tv_along >= 0.0) {
            return Err(Error::invalid("TV weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per batch.
    pub batch_size: usize,
    /// Initial rate of the linear decay to zero.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, learning_rate: 3e-3, seed: 0 }
    }
}

pub const ESTIMATOR_MAGIC: &[u8; 4] = b"BSN1";
pub const IN_CHANNELS: usize = 4;
pub const TAPS: usize = 7;
pub const CHANNELS: usize = 16;

/// Two 1-D convolutions over the bin axis and a pointwise head.
///
/// Per-bin inputs are the standardized intensity, the flat-seafloor
/// intensity `sin²θ`, the closed-form Lambertian estimate and the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedEstimator {
    pub layers: Vec<Dense>,
    pub intensity_mean: f64,
    pub intensity_std: f64,
}

impl LearnedEstimator {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [(CHANNELS, IN_CHANNELS * TAPS), (CHANNELS, CHANNELS * TAPS), (1, CHANNELS)];
        let layers = shapes
            .iter()
            .map(|&(out, inp)| {
                let bound = (6.0 / (inp + out) as f64).sqrt();
                Dense { weight: uniform(&mut rng, out, inp, bound), bias: Tensor::zeros(1, out) }
            })
            .collect();
        Self { layers, intensity_mean: 0.0, intensity_std: 1.0 }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn features(&self, w: &Window) -> Tensor {
        let mut data = Vec::with_capacity(w.intensity.len() * IN_CHANNELS);
        for i in 0..w.intensity.len() {
            if !w.mask[i] {
                data.extend_from_slice(&[0.0; IN_CHANNELS]);
                continue;
            }
            let rel = w.intensity[i] / w.gain;
            let g = w.grazing[i];
            let lam = lambertian_invert(w.intensity[i], w.gain, g).unwrap_or(0.0);
            data.extend_from_slice(&[(rel - self.intensity_mean) / self.intensity_std, g.sin().powi(2), lam, 1.0]);
        }
        Tensor::from_vec(w.intensity.len(), IN_CHANNELS, data).expect("feature shape")
    }

    fn tape_forward(tape: &Tape, vars: &[Var], x: Var, width: usize) -> Var {
        let mut h = x;
        for l in 0..2 {
            let cols = tape.im2col(h, width, TAPS);
            h = tape.tanh(tape.add_bias(tape.matmul_t(cols, vars[2 * l]), vars[2 * l + 1]));
        }
        tape.tanh(tape.add_bias(tape.matmul_t(h, vars[4]), vars[5]))
    }

    fn on_tape(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect()
    }

    /// Raw outputs for every pixel of `w`.
    fn outputs(&self, w: &Window) -> Vec<f64> {
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false);
        let x = tape.constant(self.features(w));
        let y = Self::tape_forward(&tape, &vars, x, w.cols);
        let out = tape.value(y).data().to_vec();
        out
    }

    /// Loss of one window scaled for a batch with `n_valid` pixels and
    /// `n_across`/`n_along` TV pairs, plus its parameter gradients.
    fn window_loss(&self, w: &Window, loss: &LossConfig, totals: (usize, usize, usize)) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars = self.on_tape(&tape, true);
        let x = tape.constant(self.features(w));
        let pred = Self::tape_forward(&tape, &vars, x, w.cols);
        let (valid, across, along) = pairs(w);
        let mut terms = Vec::new();
        if !valid.is_empty() {
            let targets = valid.iter().map(|&i| w.target[i]).collect();
            let p = tape.gather_rows(pred, valid.clone());
            let l = tape.normal_aware_loss(p, targets, loss.beta);
            terms.push(tape.scale(l, valid.len() as f64 / totals.0 as f64));
        }
        for (pairs, weight, total) in [(across, loss.tv_across, totals.1), (along, loss.tv_along, totals.2)] {
            if pairs.is_empty() || weight == 0.0 {
                continue;
            }
            let a = tape.gather_rows(pred, pairs.iter().map(|p| p.0).collect());
            let b = tape.gather_rows(pred, pairs.iter().map(|p| p.1).collect());
            let tv = tape.mean(tape.abs(tape.sub(a, b)));
            terms.push(tape.scale(tv, weight * pairs.len() as f64 / total as f64));
        }
        let Some(mut total) = terms.first().copied() else {
            return Ok((0.0, self.layers.iter().flat_map(|l| [Tensor::zeros(l.weight.rows(), l.weight.cols()), Tensor::zeros(1, l.bias.cols())]).collect()));
        };
        for &t in &terms[1..] {
            total = tape.add(total, t);
        }
        let value = tape.scalar(total);
        let grads = tape.backward(total)?;
        let params: Vec<Tensor> = self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect();
        Ok((value, vars.iter().zip(&params).map(|(v, p)| grads.get_or_zeros(*v, p)).collect()))
    }

    /// Batch loss (normal-aware term plus TV) and parameter gradients;
    /// `None` when no window has a valid pixel.
    pub fn batch_loss(&self, windows: &[&Window], loss: &LossConfig) -> Result<Option<(f64, Vec<Tensor>)>> {
        let totals = windows.iter().fold((0, 0, 0), |acc, w| {
            let (v, a, b) = pairs(w);
            (acc.0 + v.len(), acc.1 + a.len(), acc.2 + b.len())
        });
        if totals.0 == 0 {
            return Ok(None);
        }
        let results = par::map_slice(windows, |w| self.window_loss(w, loss, totals));
        let mut sum = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            sum += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        Ok(grads.map(|g| (sum, g)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ESTIMATOR_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weight.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weight.cols() as u32).to_le_bytes());
        }
        let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        push(self.intensity_mean);
        push(self.intensity_std);
        for l in &self.layers {
            l.weight.data().iter().chain(l.bias.data()).for_each(|&v| push(v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != ESTIMATOR_MAGIC {
            return Err(Error::Format("missing BSN1 magic".into()));
        }
        let u32_at = |o: usize| -> Result<usize> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| Error::Format("truncated layer header".into()))
        };
        let n_layers = u32_at(4)?;
        let expected = Self::init(0);
        if n_layers != expected.layers.len() {
            return Err(Error::Format(format!("expected {} layers, found {n_layers}", expected.layers.len())));
        }
        for (i, l) in expected.layers.iter().enumerate() {
            let shape = (u32_at(8 + 8 * i)?, u32_at(12 + 8 * i)?);
            if shape != l.weight.shape() {
                return Err(Error::Format(format!("layer {i} has shape {shape:?}, expected {:?}", l.weight.shape())));
            }
        }
        let body = &bytes[8 + 8 * n_layers..];
        let want = 8 * (2 + expected.param_count());
        if body.len() != want {
            return Err(Error::Format(format!("parameter block has {} bytes, expected {want}", body.len())));
        }
        let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut est = expected;
        est.intensity_mean = vals[0];
        est.intensity_std = vals[1];
        let mut cursor = 2;
        for p in est.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&vals[cursor..cursor + n]);
            cursor += n;
        }
        if !(est.intensity_std > 0.0) || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameters".into()));
        }
        Ok(est)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl NormalEstimator for LearnedEstimator {
    fn predict_window(&self, w: &Window) -> Vec<Option<f64>> {
        self.outputs(w).into_iter().zip(&w.mask).map(|(y, &m)| m.then(|| y.clamp(-1.0, 1.0))).collect()
    }
}

/// Valid pixel indices plus across-track and along-track neighbor pairs with both ends valid.
type PixelPairs = (Vec<usize>, Vec<(usize, usize)>, Vec<(usize, usize)>);

fn pairs(w: &Window) -> PixelPairs {
    let valid = (0..w.mask.len()).filter(|&i| w.mask[i]).collect();
    let mut across = Vec::new();
    let mut along = Vec::new();
    for r in 0..w.rows {
        for c in 0..w.cols {
            let i = r * w.cols + c;
            if !w.mask[i] {
                continue;
            }
            if c + 1 < w.cols && w.mask[i + 1] {
                across.push((i, i + 1));
            }
            if r + 1 < w.rows && w.mask[i + w.cols] {
                along.push((i, i + w.cols));
            }
        }
    }
    (valid, across, along)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub val_metrics: NormalMetrics,
    pub lr: f64,
}

/// Normal-aware loss and mean absolute error of `est` over all valid pixels of `windows`.
pub fn evaluate_windows(est: &dyn NormalEstimator, windows: &[Window], beta: f64) -> Result<(f64, f64)> {
    evaluate_windows_metrics(est, windows, beta).map(|(l, m)| (l, m.mae))
}

/// Normal-aware loss and [`NormalMetrics`] over all valid pixels of `windows`.
pub fn evaluate_windows_metrics(est: &dyn NormalEstimator, windows: &[Window], beta: f64) -> Result<(f64, NormalMetrics)> {
    let preds = par::map_slice(windows, |w| est.predict_window(w));
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for (w, pr) in windows.iter().zip(preds) {
        for (i, v) in pr.into_iter().enumerate() {
            if let Some(v) = v {
                p.push(v);
                t.push(w.target[i]);
            }
        }
    }
    let mask = vec![true; p.len()];
    let loss = normal_aware_loss(&p, &t, &mask, beta)?;
    Ok((loss, normal_metrics(&p, &t, &mask)?))
}

/// Fits the estimator with Adam under a linearly decaying rate. `init`
/// continues from existing parameters (normalization constants are kept).
pub fn train_learned_estimator(
    train: &[Window],
    val: &[Window],
    loss: &LossConfig,
    cfg: &TrainConfig,
    init: Option<LearnedEstimator>,
) -> Result<(LearnedEstimator, Vec<EpochLog>)> {
    loss.validate()?;
    if train.iter().all(|w| w.valid_count() == 0) {
        return Err(Error::Empty { what: "training windows" });
    }
    if val.iter().all(|w| w.valid_count() == 0) {
        return Err(Error::Empty { what: "validation windows" });
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut est = match init {
        Some(e) => e,
        None => {
            let mut e = LearnedEstimator::init(cfg.seed);
            let rel: Vec<f64> = train
                .iter()
                .flat_map(|w| w.intensity.iter().zip(&w.mask).filter(|(_, &m)| m).map(move |(i, _)| i / w.gain))
                .collect();
            let mean = rel.iter().sum::<f64>() / rel.len() as f64;
            let var = rel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rel.len() as f64;
            e.intensity_mean = mean;
            e.intensity_std = var.sqrt().max(1e-6);
            e
        }
    };
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::Linear { initial: cfg.learning_rate, total_steps: cfg.epochs * batches_per_epoch };
    let mut adam = Adam::new(schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let windows: Vec<&Window> = batch.iter().map(|&i| &train[i]).collect();
            let Some((sum, grads)) = est.batch_loss(&windows, loss)? else { continue };
            if !sum.is_finite() {
                return Err(Error::Numerical(format!(
                    "estimator training diverged at epoch {epoch}; last finite epoch loss {:?}",
                    log.last().map(|l: &EpochLog| l.train_loss)
                )));
            }
            lr = adam.schedule.rate(epoch, step);
            adam.step(&mut est.params_mut(), &grads, lr)?;
            epoch_loss += sum;
            step += 1;
        }
        let (val_loss, val_metrics) = evaluate_windows_metrics(&est, val, loss.beta)?;
        let val_mae = val_metrics.mae;
        let entry = EpochLog { epoch, train_loss: epoch_loss / batches_per_epoch as f64, val_loss, val_mae, val_metrics, lr };
        log::info!("estimator epoch {epoch}: train {:.5} val {:.5} mae {:.5}", entry.train_loss, val_loss, val_mae);
        log.push(entry);
    }
    Ok((est, log))
}

/// Splits `items` by a seeded shuffle; the first returned set holds `1 - val_fraction`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::{forward_intensity, Bin};
    use crate::geometry::{Pose, Quaternion, SonarGeometry, Vec3};
    use approx::assert_abs_diff_eq;

    #[test]
    fn smooth_l1_cases() {
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1(0.7, 0.7), 0.35);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
    }

    #[test]
    fn normal_aware_cases() {
        let m = [true];
        assert_eq!(normal_aware_loss(&[0.3, -0.2], &[0.3, -0.2], &[true, true], 1.0).unwrap(), 0.0);
        assert!((normal_aware_loss(&[0.0], &[0.5], &m, 1.0).unwrap() - (0.5 + 1.0 / 3.0) * 0.125).abs() < 1e-12);
        assert_eq!(normal_aware_loss(&[0.0], &[0.0], &m, 1.0).unwrap(), 0.0);
        assert!((normal_aware_loss(&[0.5], &[0.0], &m, 1.0).unwrap() - 0.125 / 3.0).abs() < 1e-12);
        assert!(normal_aware_loss(&[0.5], &[0.0], &[false], 1.0).is_err());
    }

    #[test]
    fn weight_grows_with_target_magnitude() {
        let losses: Vec<f64> = (0..8)
            .map(|k| {
                let g = 0.1 * k as f64;
                normal_aware_loss(&[g + 0.05], &[g], &[true], 1.0).unwrap()
            })
            .collect();
        assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
    }

    #[test]
    fn lambertian_flat_and_boundaries() {
        let t = 30f64.to_radians();
        assert_abs_diff_eq!(lambertian_invert(t.sin().powi(2), 1.0, t).unwrap(), 0.0, epsilon = 1e-12);
        // zero intensity: incidence 90°, tilt equal to the grazing angle
        assert_abs_diff_eq!(lambertian_invert(0.0, 1.0, t).unwrap(), t.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(lambertian_invert(5.0, 2.0, t).unwrap(), -(std::f64::consts::FRAC_PI_2 - t).sin(), epsilon = 1e-12);
        assert!(lambertian_invert(0.5, 1.0, 0.0).is_err());
        assert!(lambertian_invert(0.5, 1.0, 1.6).is_err());
    }

    #[test]
    fn lambertian_inverts_forward_law() {
        for side in [Side::Port, Side::Starboard] {
            for k in 0..50 {
                let t = 0.2 + 0.02 * k as f64;
                let tilt = -0.3 + 0.012 * k as f64;
                if tilt >= t {
                    continue;
                }
                let n = to_normal2(tilt.sin(), side);
                let i = forward_intensity(2.0, side, t, &n).unwrap();
                assert_abs_diff_eq!(lambertian_invert(i, 2.0, t).unwrap(), tilt.sin(), epsilon = 1e-9);
            }
        }
    }

    fn window(rows: usize, cols: usize, f: impl Fn(usize, usize) -> (f64, f64, f64, bool)) -> Window {
        let mut w = Window { rows, cols, intensity: vec![], grazing: vec![], target: vec![], mask: vec![], gain: 1.0 };
        for r in 0..rows {
            for c in 0..cols {
                let (i, g, t, m) = f(r, c);
                w.intensity.push(i);
                w.grazing.push(g);
                w.target.push(t);
                w.mask.push(m);
            }
        }
        w
    }

    fn flat_window(seed: usize) -> Window {
        window(4, 24, |r, c| {
            let g = (10.0 / (10.5 + c as f64 * 0.5 + 0.01 * (seed + r) as f64)).asin();
            (g.sin().powi(2), g, 0.0, c > 1)
        })
    }

    #[test]
    fn parameter_budget_and_serialization() {
        let e = LearnedEstimator::init(3);
        assert!(e.param_count() < 20_000);
        let back = LearnedEstimator::from_bytes(&e.to_bytes()).unwrap();
        assert_eq!(back, e);
        let mut bad = e.to_bytes();
        bad.truncate(bad.len() - 3);
        assert!(LearnedEstimator::from_bytes(&bad).is_err());
        assert!(LearnedEstimator::from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn window_loss_gradient_matches_fd() {
        let mut e = LearnedEstimator::init(1);
        let w = window(3, 12, |r, c| {
            let g = (10.0 / (11.0 + c as f64)).asin();
            (0.2 + 0.03 * ((r * 7 + c * 3) % 5) as f64, g, 0.1 * ((r + c) % 3) as f64 - 0.1, (r + c) % 4 != 0)
        });
        let loss = LossConfig { beta: 0.5, tv_across: 0.1, tv_along: 0.05 };
        let (v, w_, a) = pairs(&w);
        let totals = (v.len(), w_.len(), a.len());
        let (_, grads) = e.window_loss(&w, &loss, totals).unwrap();
        let h = 1e-6;
        for (pi, idx) in [(0usize, 5usize), (2, 40), (4, 3), (5, 0), (1, 7)] {
            let orig = e.params_mut()[pi].data()[idx];
            e.params_mut()[pi].data_mut()[idx] = orig + h;
            let lp = e.window_loss(&w, &loss, totals).unwrap().0;
            e.params_mut()[pi].data_mut()[idx] = orig - h;
            let lm = e.window_loss(&w, &loss, totals).unwrap().0;
            e.params_mut()[pi].data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[pi].data()[idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "param {pi}[{idx}]: fd {fd} vs {an}");
        }
    }

    #[test]
    fn flat_data_trains_to_zero() {
        let train: Vec<Window> = (0..8).map(flat_window).collect();
        let val: Vec<Window> = (8..10).map(flat_window).collect();
        let cfg = TrainConfig { epochs: 60, batch_size: 2, learning_rate: 1e-2, seed: 2 };
        let (est, log) = train_learned_estimator(&train, &val, &LossConfig::default(), &cfg, None).unwrap();
        assert!(log.last().unwrap().val_mae < 0.01, "{:?}", log.last());
        // moving average of the training loss does not increase
        let ma: Vec<f64> = log.windows(5).map(|w| w.iter().map(|l| l.train_loss).sum::<f64>() / 5.0).collect();
        assert!(ma.last().unwrap() <= ma.first().unwrap());
        let (est2, log2) = train_learned_estimator(&train, &val, &LossConfig::default(), &cfg, None).unwrap();
        assert_eq!(log, log2);
        assert_eq!(est, est2);
        // bounded outputs under adversarial inputs, invalid stays invalid
        let adv = window(2, 16, |r, c| (1e6 * (r + c) as f64, 1.5, 0.0, c % 3 != 0));
        for (p, m) in est.predict_window(&adv).iter().zip(&adv.mask) {
            assert_eq!(p.is_some(), *m);
            if let Some(v) = p {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let w = window(2, 8, |_, _| (0.1, 0.5, 0.0, false));
        let r = train_learned_estimator(std::slice::from_ref(&w), std::slice::from_ref(&w), &LossConfig::default(), &TrainConfig::default(), None);
        assert!(r.is_err());
    }

    #[test]
    fn lambertian_estimator_delegates() {
        let pose = Pose::new(Vec3::new(0.0, 0.0, 0.0), Quaternion::IDENTITY);
        let geom = SonarGeometry::new(0.5, 0.8, 0.0, Side::Port).unwrap();
        let mut bins: Vec<Bin> = (0..40).map(|_| Bin { intensity: 0.01, valid: false }).collect();
        for (i, b) in bins.iter_mut().enumerate().skip(19) {
            let r = 0.5 + 0.5 * i as f64;
            b.intensity = (10.0 / r).powi(2) * if i % 2 == 0 { 1.0 } else { 0.8 };
            b.valid = true;
        }
        let ping = Ping { index: 0, pose, geom, first_range: 0.5, resolution: 0.5, bins };
        let est = Lambertian.estimate_ping(&ping, 1.0);
        let prior = flat_prior_grazing(&ping);
        for (i, e) in est.iter().enumerate() {
            match (e, prior[i]) {
                (Some(n), Some(g)) if ping.bins[i].valid => {
                    let t = lambertian_invert(ping.bins[i].intensity, 1.0, g).unwrap();
                    assert_abs_diff_eq!(n.ny, -t, epsilon = 1e-12);
                }
                (None, _) => assert!(!ping.bins[i].valid || prior[i].is_none()),
                _ => panic!("bin {i} estimated without validity"),
            }
        }
    }

    #[test]
    fn split_is_disjoint() {
        let (a, b) = split_indices(30, 0.2, 4);
        assert_eq!(b.len(), 6);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }
}
