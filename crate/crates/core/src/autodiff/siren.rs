//! Sine-activated MLP `Φ: R² → R` and its analytic spatial gradient.
//!
//! The derivative of a sine layer is a cosine layer with the same weights,
//! so the spatial gradient is a forward-mode companion pass that reuses the
//! pre-activations. The same pass is available on the tape, where it can be
//! differentiated once more with respect to the weights.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{matmul_nt, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

impl Dense {
    pub(crate) fn apply(&self, x: &Tensor) -> Tensor {
        let mut y = matmul_nt(x, &self.weight);
        let cols = y.cols();
        for row in y.data_mut().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }
}

/// Affine map between metric coordinates and the network's normalized domain:
/// `normalized = (metric - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub x_offset: f64,
    pub x_scale: f64,
    pub y_offset: f64,
    pub y_scale: f64,
    pub z_offset: f64,
    pub z_scale: f64,
}

impl Scaling {
    pub const IDENTITY: Scaling = Scaling { x_offset: 0.0, x_scale: 1.0, y_offset: 0.0, y_scale: 1.0, z_offset: 0.0, z_scale: 1.0 };

    /// Maps `[xmin, xmax] × [ymin, ymax]` onto `[-1, 1]²` and `[zmin, zmax]` onto `[-1, 1]`.
    pub fn from_bounds(xmin: f64, xmax: f64, ymin: f64, ymax: f64, zmin: f64, zmax: f64) -> Result<Self> {
        let half = |lo: f64, hi: f64| 0.5 * (hi - lo);
        let s = Scaling {
            x_offset: 0.5 * (xmin + xmax),
            x_scale: half(xmin, xmax),
            y_offset: 0.5 * (ymin + ymax),
            y_scale: half(ymin, ymax),
            z_offset: 0.5 * (zmin + zmax),
            z_scale: half(zmin, zmax).max(1e-3),
        };
        if !(s.x_scale > 0.0 && s.y_scale > 0.0) || ![s.x_offset, s.y_offset, s.z_offset, s.z_scale].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("degenerate scaling bounds"));
        }
        Ok(s)
    }

    pub fn to_normalized(&self, x: f64, y: f64) -> [f64; 2] {
        [(x - self.x_offset) / self.x_scale, (y - self.y_offset) / self.y_scale]
    }

    pub fn height_to_metric(&self, z: f64) -> f64 {
        z * self.z_scale + self.z_offset
    }

    pub fn height_to_normalized(&self, z: f64) -> f64 {
        (z - self.z_offset) / self.z_scale
    }

    /// Factors turning a normalized gradient into meters per meter.
    pub fn gradient_factors(&self) -> (f64, f64) {
        (self.z_scale / self.x_scale, self.z_scale / self.y_scale)
    }

    pub fn in_domain(&self, x: f64, y: f64, tol: f64) -> bool {
        let [u, v] = self.to_normalized(x, y);
        u.abs() <= 1.0 + tol && v.abs() <= 1.0 + tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirenModel {
    /// All but the last layer are sine-activated; the last is affine.
    pub layers: Vec<Dense>,
    pub first_omega: f64,
    pub hidden_omega: f64,
    pub scaling: Scaling,
}

/// Parameter leaves of a model recorded on a tape.
#[derive(Debug, Clone)]
pub struct SirenVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl SirenVars {
    /// Weights and biases interleaved in [`SirenModel::params`] order.
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }
}

/// Tape outputs of a batched forward pass, all in normalized units.
#[derive(Debug, Clone, Copy)]
pub struct SirenTapeOutput {
    pub z: Var,
    pub gradient: Option<(Var, Var)>,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect()).expect("shape")
}

impl SirenModel {
    /// `depth` counts linear layers (input and output included), so `depth = 5`
    /// has four sine layers. First-layer weights are `U(±1/in)` under
    /// activation scale `first_omega`; later weights are `U(±√(6/in)/ω)` with
    /// `ω = 1`; the output layer uses half that bound. Biases are `U(±1/√in)`.
    pub fn init(depth: usize, width: usize, first_omega: f64, seed: u64) -> Result<Self> {
        if depth < 2 {
            return Err(Error::invalid("SIREN depth must be at least 2"));
        }
        if width == 0 || !(first_omega > 0.0) {
            return Err(Error::invalid("SIREN width and ω must be positive"));
        }
        let hidden_omega = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let fan_in = if l == 0 { 2 } else { width };
            let fan_out = if l + 1 == depth { 1 } else { width };
            let bound = match l {
                0 => 1.0 / fan_in as f64,
                _ if l + 1 == depth => 0.5 * (6.0 / fan_in as f64).sqrt() / hidden_omega,
                _ => (6.0 / fan_in as f64).sqrt() / hidden_omega,
            };
            let weight = uniform(&mut rng, fan_out, fan_in, bound);
            let bias = uniform(&mut rng, 1, fan_out, 1.0 / (fan_in as f64).sqrt());
            layers.push(Dense { weight, bias });
        }
        Ok(Self { layers, first_omega, hidden_omega, scaling: Scaling::IDENTITY })
    }

    pub fn with_scaling(mut self, s: Scaling) -> Self {
        self.scaling = s;
        self
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    fn omega(&self, layer: usize) -> f64 {
        if layer == 0 {
            self.first_omega
        } else {
            self.hidden_omega
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Values plus forward-mode tangents for each seed direction set in `tangents`.
    fn eval(&self, points: &[[f64; 2]], mut tangents: Vec<Tensor>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = points.len();
        let mut h = Tensor::from_vec(n, 2, points.iter().flat_map(|p| *p).collect()).expect("shape");
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.apply(&h);
            let mut next_t: Vec<Tensor> = tangents.iter().map(|t| matmul_nt(t, &layer.weight)).collect();
            if l == last {
                return (a.into_vec(), next_t.into_iter().map(Tensor::into_vec).collect());
            }
            let w = self.omega(l);
            for t in &mut next_t {
                for (tv, av) in t.data_mut().iter_mut().zip(a.data()) {
                    *tv *= w * (w * av).cos();
                }
            }
            h = a.map(|v| (w * v).sin());
            tangents = next_t;
        }
        unreachable!("model has an output layer")
    }

    /// Normalized output at normalized coordinates.
    pub fn forward(&self, xy: [f64; 2]) -> f64 {
        self.eval(&[xy], Vec::new()).0[0]
    }

    pub fn forward_batch(&self, points: &[[f64; 2]]) -> Vec<f64> {
        self.eval(points, Vec::new()).0
    }

    /// `(∂Φ/∂x, ∂Φ/∂y)` in normalized units.
    pub fn spatial_gradient(&self, xy: [f64; 2]) -> [f64; 2] {
        self.value_and_gradient_batch(&[xy]).1[0]
    }

    pub fn value_and_gradient_batch(&self, points: &[[f64; 2]]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let n = points.len();
        let ex = Tensor::from_vec(n, 2, [1.0, 0.0].repeat(n)).expect("shape");
        let ey = Tensor::from_vec(n, 2, [0.0, 1.0].repeat(n)).expect("shape");
        let (z, t) = self.eval(points, vec![ex, ey]);
        let g = t[0].iter().zip(&t[1]).map(|(&gx, &gy)| [gx, gy]).collect();
        (z, g)
    }

    /// Values and directional derivatives along per-point directions.
    pub fn value_and_directional_batch(&self, points: &[[f64; 2]], dirs: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(points.len(), dirs.len());
        let d = Tensor::from_vec(dirs.len(), 2, dirs.iter().flat_map(|p| *p).collect()).expect("shape");
        let (z, mut t) = self.eval(points, vec![d]);
        (z, t.pop().expect("one tangent"))
    }

    /// Metric height at metric `(x, y)`.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.scaling.height_to_metric(self.forward(self.scaling.to_normalized(x, y)))
    }

    /// Metric heights for metric points.
    pub fn heights(&self, points: &[[f64; 2]]) -> Vec<f64> {
        let np: Vec<[f64; 2]> = points.iter().map(|p| self.scaling.to_normalized(p[0], p[1])).collect();
        self.forward_batch(&np).into_iter().map(|z| self.scaling.height_to_metric(z)).collect()
    }

    /// Metric slope `(dz/dx, dz/dy)` at metric `(x, y)`.
    pub fn metric_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let [gx, gy] = self.spatial_gradient(self.scaling.to_normalized(x, y));
        let (fx, fy) = self.scaling.gradient_factors();
        (gx * fx, gy * fy)
    }

    pub fn on_tape(&self, tape: &Tape) -> SirenVars {
        let mut vars = SirenVars { weights: Vec::new(), biases: Vec::new() };
        for l in &self.layers {
            vars.weights.push(tape.param(l.weight.clone()));
            vars.biases.push(tape.param(l.bias.clone()));
        }
        vars
    }

    /// Records the forward pass (and optionally the spatial-gradient companion
    /// pass) for normalized `points` (an `n × 2` tape value).
    pub fn tape_forward(&self, tape: &Tape, vars: &SirenVars, points: Var, with_gradient: bool) -> SirenTapeOutput {
        let n = tape.shape(points).0;
        let mut tangents = if with_gradient {
            vec![
                tape.constant(Tensor::from_vec(n, 2, [1.0, 0.0].repeat(n)).expect("shape")),
                tape.constant(Tensor::from_vec(n, 2, [0.0, 1.0].repeat(n)).expect("shape")),
            ]
        } else {
            Vec::new()
        };
        let mut h = points;
        let last = self.layers.len() - 1;
        for l in 0..self.layers.len() {
            let (w, b) = (vars.weights[l], vars.biases[l]);
            let a = tape.add_bias(tape.matmul_t(h, w), b);
            let lin: Vec<Var> = tangents.iter().map(|&t| tape.matmul_t(t, w)).collect();
            if l == last {
                let gradient = with_gradient.then(|| (lin[0], lin[1]));
                return SirenTapeOutput { z: a, gradient };
            }
            let om = self.omega(l);
            let s = if om == 1.0 { a } else { tape.scale(a, om) };
            if with_gradient {
                let c = tape.cos(s);
                let c = if om == 1.0 { c } else { tape.scale(c, om) };
                tangents = lin.into_iter().map(|t| tape.mul(c, t)).collect();
            }
            h = tape.sin(s);
        }
        unreachable!("model has an output layer")
    }

    /// Copies tape gradients for this model's parameters into tensors in [`Self::params`] order.
    pub fn collect_gradients(&self, grads: &super::tape::Gradients, vars: &SirenVars) -> Vec<Tensor> {
        vars.all().iter().zip(self.params()).map(|(v, p)| grads.get_or_zeros(*v, p)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.depth() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        let s = &self.scaling;
        for v in [self.first_omega, self.hidden_omega, s.x_offset, s.x_scale, s.y_offset, s.y_scale, s.z_offset, s.z_scale] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing SRN1 magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (depth, width) = (u32_at(4), u32_at(8));
        if depth < 2 || width == 0 {
            return Err(Error::Format(format!("bad SIREN shape depth={depth} width={width}")));
        }
        let floats = &bytes[12..];
        if !floats.len().is_multiple_of(8) {
            return Err(Error::Format("truncated parameter block".into()));
        }
        let vals: Vec<f64> = floats.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut model = SirenModel::init(depth, width, 1.0, 0)?;
        let expected = 8 + model.param_count();
        if vals.len() != expected {
            return Err(Error::Format(format!("expected {expected} values, found {}", vals.len())));
        }
        model.first_omega = vals[0];
        model.hidden_omega = vals[1];
        model.scaling =
            Scaling { x_offset: vals[2], x_scale: vals[3], y_offset: vals[4], y_scale: vals[5], z_offset: vals[6], z_scale: vals[7] };
        let mut cursor = 8;
        for p in model.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&vals[cursor..cursor + n]);
            cursor += n;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
