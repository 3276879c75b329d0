//! Node-registered bathymetry grids: bilinear sampling, exact patch
//! gradients, synthetic terrain and a plain-text grid format.
//!
//! Node `(col, row)` sits at `(x0 + col·cell, y0 + row·cell)`; row 0 is the
//! southernmost row in memory and the northernmost row on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    x0: f64,
    y0: f64,
    cell_size: f64,
    ncols: usize,
    nrows: usize,
    /// Row-major, row 0 south. NaN marks nodata.
    heights: Vec<f64>,
    nodata_value: f64,
}

impl HeightField {
    pub fn new(x0: f64, y0: f64, cell_size: f64, ncols: usize, nrows: usize, heights: Vec<f64>) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::invalid("cell size must be positive"));
        }
        if ncols < 2 || nrows < 2 {
            return Err(Error::invalid("grid needs at least 2×2 nodes"));
        }
        if heights.len() != ncols * nrows {
            return Err(Error::invalid(format!("expected {} heights, got {}", ncols * nrows, heights.len())));
        }
        if heights.iter().any(|h| h.is_infinite()) {
            return Err(Error::invalid("heights must be finite or nodata"));
        }
        Ok(Self { x0, y0, cell_size, ncols, nrows, heights, nodata_value: DEFAULT_NODATA })
    }

    pub fn constant(x0: f64, y0: f64, cell_size: f64, ncols: usize, nrows: usize, z: f64) -> Result<Self> {
        Self::new(x0, y0, cell_size, ncols, nrows, vec![z; ncols * nrows])
    }

    /// Grid filled from `f(x, y)` evaluated at every node.
    pub fn from_fn(x0: f64, y0: f64, cell_size: f64, ncols: usize, nrows: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut heights = Vec::with_capacity(ncols * nrows);
        for r in 0..nrows {
            for c in 0..ncols {
                heights.push(f(x0 + c as f64 * cell_size, y0 + r as f64 * cell_size));
            }
        }
        Self::new(x0, y0, cell_size, ncols, nrows, heights)
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.x0, self.y0)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn nodata_value(&self) -> f64 {
        self.nodata_value
    }

    pub fn with_nodata_value(mut self, v: f64) -> Self {
        self.nodata_value = v;
        self
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// `(xmin, ymin, xmax, ymax)` of the node lattice.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.x0,
            self.y0,
            self.x0 + (self.ncols - 1) as f64 * self.cell_size,
            self.y0 + (self.nrows - 1) as f64 * self.cell_size,
        )
    }

    pub fn node_xy(&self, col: usize, row: usize) -> (f64, f64) {
        (self.x0 + col as f64 * self.cell_size, self.y0 + row as f64 * self.cell_size)
    }

    /// Stored value at a node; `None` for nodata.
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let v = self.heights[row * self.ncols + col];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, col: usize, row: usize, z: f64) {
        self.heights[row * self.ncols + col] = z;
    }

    pub fn set_nodata(&mut self, col: usize, row: usize) {
        self.heights[row * self.ncols + col] = f64::NAN;
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.extent();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    /// Cell owning `(x, y)` with half-open `[x_i, x_{i+1})` ownership, plus local coordinates.
    fn locate(&self, x: f64, y: f64) -> Result<(usize, usize, f64, f64)> {
        if !self.contains(x, y) {
            return Err(Error::OutOfExtent { x, y });
        }
        let fx = snap((x - self.x0) / self.cell_size);
        let fy = snap((y - self.y0) / self.cell_size);
        let c = (fx.floor() as usize).min(self.ncols - 2);
        let r = (fy.floor() as usize).min(self.nrows - 2);
        Ok((c, r, fx - c as f64, fy - r as f64))
    }

    fn corners(&self, c: usize, r: usize) -> [f64; 4] {
        let i = r * self.ncols + c;
        [self.heights[i], self.heights[i + 1], self.heights[i + self.ncols], self.heights[i + self.ncols + 1]]
    }

    /// Bilinear height; `Ok(None)` when a surrounding node is nodata.
    pub fn sample_height(&self, x: f64, y: f64) -> Result<Option<f64>> {
        let (c, r, u, v) = self.locate(x, y)?;
        let [z00, z10, z01, z11] = self.corners(c, r);
        let z = (1.0 - v) * ((1.0 - u) * z00 + u * z10) + v * ((1.0 - u) * z01 + u * z11);
        Ok((!z.is_nan()).then_some(z))
    }

    /// Exact gradient of the bilinear patch containing `(x, y)`.
    pub fn sample_gradient(&self, x: f64, y: f64) -> Result<Option<(f64, f64)>> {
        let (c, r, u, v) = self.locate(x, y)?;
        let [z00, z10, z01, z11] = self.corners(c, r);
        let gx = ((1.0 - v) * (z10 - z00) + v * (z11 - z01)) / self.cell_size;
        let gy = ((1.0 - u) * (z01 - z00) + u * (z11 - z10)) / self.cell_size;
        Ok((!(gx.is_nan() || gy.is_nan())).then_some((gx, gy)))
    }

    /// Height, or `None` outside the grid or on nodata.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.sample_height(x, y).ok().flatten()
    }

    pub fn gradient_at(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        self.sample_gradient(x, y).ok().flatten()
    }

    /// Finite heights only.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.heights.iter().filter(|h| !h.is_nan()).fold(None, |acc, &h| match acc {
            None => Some((h, h)),
            Some((lo, hi)) => Some((lo.min(h), hi.max(h))),
        })
    }

    pub fn same_lattice(&self, other: &HeightField) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && (self.x0 - other.x0).abs() < 1e-9
            && (self.y0 - other.y0).abs() < 1e-9
            && (self.cell_size - other.cell_size).abs() < 1e-12
    }
}

/// Rounds lattice coordinates that are within float noise of a node.
fn snap(f: f64) -> f64 {
    let r = f.round();
    if (f - r).abs() < 1e-9 {
        r
    } else {
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hill {
    pub cx: f64,
    pub cy: f64,
    /// Gaussian standard deviation, meters.
    pub radius: f64,
    /// Peak height above the base (negative for a depression).
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ridge {
    pub start: (f64, f64),
    pub end: (f64, f64),
    /// Full width; the cross profile is Gaussian with σ = width/2.
    pub width: f64,
    pub height: f64,
}

/// Randomly placed small boulders.
#[derive(Debug, Clone, PartialEq)]
pub struct RockField {
    pub count: usize,
    pub radius_range: (f64, f64),
    pub amplitude_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainSpec {
    pub ncols: usize,
    pub nrows: usize,
    pub cell_size: f64,
    pub origin: (f64, f64),
    pub base_depth: f64,
    pub hills: Vec<Hill>,
    pub rocks: RockField,
    pub ridges: Vec<Ridge>,
    /// Gaussian blur σ in cells applied after feature synthesis; 0 disables.
    pub smoothness: f64,
    pub seed: u64,
}

impl TerrainSpec {
    pub fn flat(ncols: usize, nrows: usize, cell_size: f64, base_depth: f64) -> Self {
        Self {
            ncols,
            nrows,
            cell_size,
            origin: (0.0, 0.0),
            base_depth,
            hills: Vec::new(),
            rocks: RockField { count: 0, radius_range: (0.5, 1.0), amplitude_range: (0.2, 0.5) },
            ridges: Vec::new(),
            smoothness: 0.0,
            seed: 0,
        }
    }

    /// 128×128 nodes at 0.5 m: rolling hills, a ridge and ten boulders around 20 m depth.
    pub fn desk_default() -> Self {
        let hill = |cx, cy, radius, amplitude| Hill { cx, cy, radius, amplitude };
        Self {
            hills: vec![
                hill(18.0, 20.0, 9.0, 1.4),
                hill(46.0, 44.0, 10.0, 1.2),
                hill(44.0, 14.0, 7.0, -1.0),
                hill(16.0, 48.0, 8.0, -0.9),
                hill(32.0, 32.0, 14.0, 0.6),
            ],
            rocks: RockField { count: 10, radius_range: (0.7, 1.2), amplitude_range: (0.25, 0.5) },
            ridges: vec![Ridge { start: (6.0, 34.0), end: (30.0, 58.0), width: 6.0, height: 0.8 }],
            smoothness: 0.0,
            seed: 7,
            ..Self::flat(128, 128, 0.5, -20.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncols < 2 || self.nrows < 2 || !(self.cell_size > 0.0) {
            return Err(Error::invalid("terrain grid needs ≥2×2 nodes and positive cell size"));
        }
        if !self.base_depth.is_finite() || !(self.smoothness >= 0.0) {
            return Err(Error::invalid("base depth must be finite and smoothness non-negative"));
        }
        for h in &self.hills {
            if !(h.radius > 0.0) || !h.amplitude.is_finite() || !h.cx.is_finite() || !h.cy.is_finite() {
                return Err(Error::invalid("hill radius must be positive and parameters finite"));
            }
        }
        for r in &self.ridges {
            if !(r.width > 0.0) || !r.height.is_finite() {
                return Err(Error::invalid("ridge width must be positive and height finite"));
            }
        }
        let rk = &self.rocks;
        if rk.count > 0 {
            let (r0, r1) = rk.radius_range;
            let (a0, a1) = rk.amplitude_range;
            if !(r0 > 0.0 && r1 >= r0) || !(a0.is_finite() && a1.is_finite() && a1 >= a0) {
                return Err(Error::invalid("rock radius range must be positive and ordered"));
            }
        }
        Ok(())
    }

    /// Upper bound on `|z - base_depth|`.
    pub fn amplitude_budget(&self) -> f64 {
        let hills: f64 = self.hills.iter().map(|h| h.amplitude.abs()).sum();
        let ridges: f64 = self.ridges.iter().map(|r| r.height.abs()).sum();
        let (a0, a1) = self.rocks.amplitude_range;
        hills + ridges + self.rocks.count as f64 * a0.abs().max(a1.abs())
    }
}

fn gaussian_bump(d2: f64, sigma: f64) -> f64 {
    (-0.5 * d2 / (sigma * sigma)).exp()
}

fn segment_distance2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Deterministic synthetic seabed from `spec`.
pub fn generate_terrain(spec: &TerrainSpec) -> Result<HeightField> {
    spec.validate()?;
    let (ox, oy) = spec.origin;
    let width = (spec.ncols - 1) as f64 * spec.cell_size;
    let height = (spec.nrows - 1) as f64 * spec.cell_size;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bumps: Vec<Hill> = spec.hills.clone();
    for _ in 0..spec.rocks.count {
        let (r0, r1) = spec.rocks.radius_range;
        let (a0, a1) = spec.rocks.amplitude_range;
        bumps.push(Hill {
            cx: ox + rng.gen::<f64>() * width,
            cy: oy + rng.gen::<f64>() * height,
            radius: r0 + rng.gen::<f64>() * (r1 - r0),
            amplitude: a0 + rng.gen::<f64>() * (a1 - a0),
        });
    }

    let mut field = HeightField::from_fn(ox, oy, spec.cell_size, spec.ncols, spec.nrows, |x, y| {
        let mut z = spec.base_depth;
        for b in &bumps {
            let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
            z += b.amplitude * gaussian_bump(d2, b.radius);
        }
        for r in &spec.ridges {
            z += r.height * gaussian_bump(segment_distance2((x, y), r.start, r.end), 0.5 * r.width);
        }
        z
    })?;
    if spec.smoothness > 0.0 {
        blur(&mut field, spec.smoothness);
    }
    if field.heights.iter().any(|h| !h.is_finite()) {
        return Err(Error::Numerical("terrain produced non-finite heights".into()));
    }
    Ok(field)
}

/// Separable normalized Gaussian blur with clamped edges.
fn blur(field: &mut HeightField, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| gaussian_bump((k * k) as f64, sigma)).collect();
    let norm: f64 = kernel.iter().sum();
    let (nc, nr) = (field.ncols as isize, field.nrows as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..nr {
            for c in 0..nc {
                let mut acc = 0.0;
                for (k, w) in (-radius..=radius).zip(&kernel) {
                    let (cc, rr) = if horizontal { ((c + k).clamp(0, nc - 1), r) } else { (c, (r + k).clamp(0, nr - 1)) };
                    acc += w * src[(rr * nc + cc) as usize];
                }
                out[(r * nc + c) as usize] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(&field.heights, true);
    field.heights = pass(&tmp, false);
}

pub fn write_grid(field: &HeightField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_grid(field))?;
    Ok(())
}

pub fn format_grid(field: &HeightField) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ncols {}", field.ncols);
    let _ = writeln!(s, "nrows {}", field.nrows);
    let _ = writeln!(s, "xllcorner {}", field.x0);
    let _ = writeln!(s, "yllcorner {}", field.y0);
    let _ = writeln!(s, "cellsize {}", field.cell_size);
    let _ = writeln!(s, "nodata_value {}", field.nodata_value);
    for r in (0..field.nrows).rev() {
        let row = &field.heights[r * field.ncols..(r + 1) * field.ncols];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let v = if v.is_nan() { field.nodata_value } else { *v };
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<HeightField> {
    parse_grid(&fs::read_to_string(path)?)
}

const HEADER_KEYS: [&str; 6] = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"];

pub fn parse_grid(text: &str) -> Result<HeightField> {
    let mut header = [None::<f64>; 6];
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    while let Some(&(i, line)) = lines.peek() {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default().to_ascii_lowercase();
        let Some(slot) = HEADER_KEYS.iter().position(|k| *k == key) else { break };
        let value = parts
            .next()
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::parse(i + 1, format!("bad value for {key}")))?;
        if parts.next().is_some() {
            return Err(Error::parse(i + 1, format!("trailing tokens after {key}")));
        }
        header[slot] = Some(value);
        lines.next();
    }
    let get = |k: usize| header[k].ok_or_else(|| Error::parse(0, format!("missing header {}", HEADER_KEYS[k])));
    let (ncols, nrows) = (get(0)?, get(1)?);
    if ncols < 2.0 || nrows < 2.0 || ncols.fract() != 0.0 || nrows.fract() != 0.0 {
        return Err(Error::parse(1, "ncols/nrows must be integers ≥ 2"));
    }
    let (ncols, nrows) = (ncols as usize, nrows as usize);
    let (x0, y0, cell, nodata) = (get(2)?, get(3)?, get(4)?, get(5)?);

    let mut heights = vec![0.0; ncols * nrows];
    let mut rows_read = 0;
    for (i, line) in lines {
        if rows_read == nrows {
            return Err(Error::parse(i + 1, "more data rows than nrows"));
        }
        let r = nrows - 1 - rows_read;
        let mut n = 0;
        for tok in line.split_whitespace() {
            if n == ncols {
                return Err(Error::parse(i + 1, format!("row has more than {ncols} values")));
            }
            let v: f64 = tok.parse().map_err(|_| Error::parse(i + 1, format!("bad number {tok:?}")))?;
            heights[r * ncols + n] = if v == nodata { f64::NAN } else { v };
            n += 1;
        }
        if n != ncols {
            return Err(Error::parse(i + 1, format!("row has {n} values, expected {ncols}")));
        }
        rows_read += 1;
    }
    if rows_read == 0 {
        return Err(Error::parse(text.lines().count(), "missing data rows"));
    }
    if rows_read < nrows {
        return Err(Error::parse(text.lines().count(), format!("expected {nrows} data rows, found {rows_read}")));
    }
    let mut f = HeightField::new(x0, y0, cell, ncols, nrows, heights).map_err(|e| Error::parse(1, e.to_string()))?;
    f.nodata_value = nodata;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};

    fn plane() -> HeightField {
        HeightField::from_fn(-3.0, 2.0, 0.5, 20, 16, |x, y| 0.1 * x + 0.2 * y).unwrap()
    }

    fn random_field(seed: u64) -> HeightField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<f64> = (0..12 * 10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        HeightField::new(1.0, -4.0, 0.7, 12, 10, h).unwrap()
    }

    #[test]
    fn node_queries_are_exact() {
        let f = random_field(1);
        for r in 0..f.nrows() {
            for c in 0..f.ncols() {
                let (x, y) = f.node_xy(c, r);
                assert_eq!(f.sample_height(x, y).unwrap(), f.get(c, r));
            }
        }
    }

    #[test]
    fn cell_center_is_corner_average() {
        let f = HeightField::new(0.0, 0.0, 1.0, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(f.sample_height(0.5, 0.5).unwrap(), Some(2.5));
    }

    #[test]
    fn plane_is_reproduced() {
        let f = plane();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x0, y0, x1, y1) = f.extent();
        for _ in 0..200 {
            let (x, y) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
            assert_abs_diff_eq!(f.sample_height(x, y).unwrap().unwrap(), 0.1 * x + 0.2 * y, epsilon = 1e-12);
            let (gx, gy) = f.sample_gradient(x, y).unwrap().unwrap();
            assert_abs_diff_eq!(gx, 0.1, epsilon = 1e-12);
            assert_abs_diff_eq!(gy, 0.2, epsilon = 1e-12);
        }
        let flat = HeightField::constant(0.0, 0.0, 1.0, 4, 4, -7.0).unwrap();
        assert_eq!(flat.sample_gradient(1.3, 2.2).unwrap(), Some((0.0, 0.0)));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let f = random_field(9);
        let h = f.cell_size() / 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            // stay inside one cell so the difference stencil does not straddle a patch edge
            let c = rng.gen_range(0..f.ncols() - 1);
            let r = rng.gen_range(0..f.nrows() - 1);
            let (nx, ny) = f.node_xy(c, r);
            let x = nx + f.cell_size() * rng.gen_range(0.05..0.95);
            let y = ny + f.cell_size() * rng.gen_range(0.05..0.95);
            let z = |x, y| f.sample_height(x, y).unwrap().unwrap();
            let fdx = (z(x + h, y) - z(x - h, y)) / (2.0 * h);
            let fdy = (z(x, y + h) - z(x, y - h)) / (2.0 * h);
            let (gx, gy) = f.sample_gradient(x, y).unwrap().unwrap();
            assert_abs_diff_eq!(gx, fdx, epsilon = 1e-6);
            assert_abs_diff_eq!(gy, fdy, epsilon = 1e-6);
        }
    }

    #[test]
    fn half_open_cell_ownership() {
        let f = HeightField::new(0.0, 0.0, 1.0, 3, 2, vec![0.0, 1.0, 3.0, 0.0, 1.0, 3.0]).unwrap();
        // x = 1 belongs to the second cell, slope 2
        assert_eq!(f.sample_gradient(1.0, 0.5).unwrap().unwrap().0, 2.0);
        assert_eq!(f.sample_gradient(0.999, 0.5).unwrap().unwrap().0, 1.0);
        // the far edge falls back to the last cell
        assert_eq!(f.sample_gradient(2.0, 0.5).unwrap().unwrap().0, 2.0);
    }

    #[test]
    fn out_of_extent_and_nodata() {
        let mut f = plane();
        assert!(matches!(f.sample_height(-10.0, 3.0), Err(Error::OutOfExtent { .. })));
        f.set_nodata(1, 1);
        let (x, y) = f.node_xy(1, 1);
        assert_eq!(f.sample_height(x - 0.1, y - 0.1).unwrap(), None);
        assert_eq!(f.sample_gradient(x - 0.1, y - 0.1).unwrap(), None);
    }

    #[test]
    fn featureless_terrain_is_constant() {
        let f = generate_terrain(&TerrainSpec::flat(16, 12, 0.5, -12.0)).unwrap();
        assert!(f.heights().iter().all(|&h| h == -12.0));
    }

    #[test]
    fn single_hill_peak() {
        let mut spec = TerrainSpec::flat(41, 41, 0.5, -20.0);
        spec.hills.push(Hill { cx: 10.0, cy: 10.0, radius: 3.0, amplitude: 2.5 });
        let f = generate_terrain(&spec).unwrap();
        assert_abs_diff_eq!(f.sample_height(10.0, 10.0).unwrap().unwrap(), -17.5, epsilon = 1e-9);
    }

    #[test]
    fn terrain_is_deterministic_and_bounded() {
        let spec = TerrainSpec { smoothness: 1.0, ..TerrainSpec::desk_default() };
        let a = generate_terrain(&spec).unwrap();
        let b = generate_terrain(&spec).unwrap();
        assert_eq!(a.heights(), b.heights());
        let budget = spec.amplitude_budget();
        for &h in a.heights() {
            assert!((h - spec.base_depth).abs() <= budget + 1e-12);
        }
        let other = generate_terrain(&TerrainSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.heights(), other.heights());
    }

    #[test]
    fn invalid_terrain_rejected() {
        let mut spec = TerrainSpec::flat(8, 8, 0.5, -10.0);
        spec.hills.push(Hill { cx: 1.0, cy: 1.0, radius: 0.0, amplitude: 1.0 });
        assert!(generate_terrain(&spec).is_err());
        let mut spec = TerrainSpec::flat(8, 8, 0.5, -10.0);
        spec.hills.push(Hill { cx: 1.0, cy: 1.0, radius: 1.0, amplitude: f64::INFINITY });
        assert!(generate_terrain(&spec).is_err());
    }

    #[test]
    fn grid_roundtrip_and_orientation() {
        let f = random_field(5);
        let text = format_grid(&f);
        let back = parse_grid(&text).unwrap();
        assert_eq!(back, f);
        // first data row on disk is the northern edge
        let first_row = text.lines().nth(6).unwrap();
        let v: f64 = first_row.split_whitespace().next().unwrap().parse().unwrap();
        assert_eq!(Some(v), f.get(0, f.nrows() - 1));
    }

    #[test]
    fn grid_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.asc");
        let f = generate_terrain(&TerrainSpec::desk_default()).unwrap();
        write_grid(&f, &path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), f);
    }

    #[test]
    fn grid_parse_errors() {
        let header = "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -9999\n";
        let e = parse_grid(header).unwrap_err();
        assert!(e.to_string().contains("missing data rows"), "{e}");
        let e = parse_grid(&format!("{header}1 2 3\n4 5\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 8, .. }), "{e}");
        let e = parse_grid(&format!("{header}1 2 x\n4 5 6\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 7, .. }), "{e}");
        let e = parse_grid("ncols 3\nnrows 2\n1 2 3\n").unwrap_err();
        assert!(e.to_string().contains("missing header"), "{e}");
    }

    #[test]
    fn grid_nodata_cells() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -9999\n1 -9999\n3 4\n";
        let f = parse_grid(text).unwrap();
        assert_eq!(f.get(1, 1), None);
        assert_eq!(f.get(0, 1), Some(1.0));
        assert_eq!(f.get(1, 0), Some(4.0));
        assert!(format_grid(&f).contains("-9999"));
    }

    proptest! {
        #[test]
        fn directional_differences_match_gradient(seed in 0u64..1000, u in 0.05f64..0.95, v in 0.05f64..0.95,
                                                  angle in 0f64..std::f64::consts::TAU) {
            let f = random_field(seed);
            let (nx, ny) = f.node_xy(4, 3);
            let (x, y) = (nx + u * f.cell_size(), ny + v * f.cell_size());
            let h = 1e-4;
            let (dx, dy) = (angle.cos(), angle.sin());
            let z = |t: f64| f.sample_height(x + t * dx, y + t * dy).unwrap().unwrap();
            let fd = (z(h) - z(-h)) / (2.0 * h);
            let (gx, gy) = f.sample_gradient(x, y).unwrap().unwrap();
            prop_assert!((fd - (gx * dx + gy * dy)).abs() < 1e-6);
        }
    }
}
