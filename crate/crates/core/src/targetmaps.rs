//! Ground-truth maps from keypoint annotations: peak-normalised Gaussian
//! likelihood maps (fixed or adaptive width) and unit-mass density maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::RasterGrid;
use crate::scalar::{lit, Scalar};

/// Keypoint coordinates are snapped to multiples of this step so that shifting
/// by whole pixels is exact in floating point.
pub const COORD_STEP: f64 = 1.0 / 1024.0;

/// Smallest kernel width used when two keypoints coincide.
pub const MIN_SIGMA: f64 = 0.05;

fn snap(v: f64) -> f64 {
    (v / COORD_STEP).round() * COORD_STEP
}

/// Feature centres in raster pixel coordinates; pixel `(r, c)` is centred on
/// coordinate `(r, c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    height: usize,
    width: usize,
    points: Vec<(f64, f64)>,
}

impl KeypointSet {
    /// Validates bounds and snaps coordinates to the `COORD_STEP` lattice.
    /// Columns that snap onto `width` wrap to 0.
    pub fn new(height: usize, width: usize, points: Vec<(f64, f64)>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("keypoint raster {height}x{width} is empty")));
        }
        let (hf, wf) = (height as f64, width as f64);
        let points = points
            .into_iter()
            .enumerate()
            .map(|(i, (r, c))| {
                if !(r.is_finite() && c.is_finite() && (0.0..hf).contains(&r) && (0.0..wf).contains(&c)) {
                    return Err(Error::shape(format!(
                        "keypoint {i} at ({r}, {c}) lies outside the {height}x{width} raster"
                    )));
                }
                let r = snap(r).min(hf - COORD_STEP);
                let mut c = snap(c);
                if c >= wf {
                    c -= wf;
                }
                Ok((r, c))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { height, width, points })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            points: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Columns move to `(col + offset) mod W`, matching `circular_shift`.
    pub fn shifted(&self, offset: usize) -> Self {
        let w = self.width as f64;
        let k = (offset % self.width) as f64;
        let points = self
            .points
            .iter()
            .map(|&(r, c)| {
                let mut c = c + k;
                if c >= w {
                    c -= w;
                }
                (r, c)
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            points,
        }
    }
}

/// Squared pixel distance, with the column difference wrapped when asked.
fn dist2(a: (f64, f64), b: (f64, f64), width: usize, wrap: bool) -> f64 {
    let dr = a.0 - b.0;
    let mut dc = (a.1 - b.1).abs();
    if wrap {
        dc = dc.min(width as f64 - dc);
    }
    dr * dr + dc * dc
}

/// Ascending distances from each keypoint to its `k` nearest other keypoints.
pub fn nearest_neighbor_distances(kps: &KeypointSet, k: usize, wrap_azimuth: bool) -> Vec<Vec<f64>> {
    let pts = kps.points();
    pts.iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut d: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &q)| dist2(p, q, kps.width, wrap_azimuth).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            d.truncate(k);
            d
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMapConfig {
    pub mode: SigmaMode,
    pub sigma: f64,
    pub p_t: f64,
    pub beta: f64,
    pub wrap_azimuth: bool,
    pub truncation_radius: f64,
}

impl Default for GaussianMapConfig {
    fn default() -> Self {
        Self {
            mode: SigmaMode::Fixed,
            sigma: 1.25,
            p_t: 0.33,
            beta: 2.5,
            wrap_azimuth: true,
            truncation_radius: 4.0,
        }
    }
}

impl GaussianMapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.beta > 0.0 && self.truncation_radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma, beta and truncation_radius must be positive: {self:?}"
            )));
        }
        if !(self.p_t > 0.0 && self.p_t < 1.0) {
            return Err(Error::InvalidConfig(format!("p_t must lie in (0, 1), got {}", self.p_t)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMapConfig {
    pub k_neighbors: usize,
    pub f: f64,
    pub truncation_radius: f64,
    /// Kernel width for a keypoint without neighbours.
    pub fallback_sigma: f64,
    pub wrap_azimuth: bool,
}

impl Default for DensityMapConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 3,
            f: 10.0,
            truncation_radius: 4.0,
            fallback_sigma: 2.5,
            wrap_azimuth: true,
        }
    }
}

impl DensityMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 || !(self.f > 0.0 && self.truncation_radius > 0.0 && self.fallback_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "density map needs k_neighbors >= 1 and positive f, truncation and fallback: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `min(d_min * p_t, beta)`, or `beta` for a keypoint without neighbours.
pub fn adaptive_sigma(d_min: Option<f64>, cfg: &GaussianMapConfig) -> f64 {
    match d_min {
        Some(d) => (d * cfg.p_t).min(cfg.beta).max(MIN_SIGMA),
        None => cfg.beta,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Gaussian,
    Density,
}

impl MapKind {
    pub fn channel_name(self) -> &'static str {
        match self {
            MapKind::Gaussian => "gaussian",
            MapKind::Density => "density",
        }
    }
}

/// Row-major `H x W` target.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
    pub kind: MapKind,
}

impl<T: Scalar> TargetMap<T> {
    pub fn zeros(height: usize, width: usize, kind: MapKind) -> Self {
        Self {
            height,
            width,
            values: vec![T::zero(); height * width],
            kind,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_raster(&self) -> RasterGrid<T> {
        RasterGrid::from_plane(self.height, self.width, self.kind.channel_name(), self.values.clone())
            .expect("plane matches dimensions")
    }

    pub fn from_raster(grid: &RasterGrid<T>, kind: MapKind) -> Result<Self> {
        if grid.num_channels() != 1 {
            return Err(Error::shape(format!(
                "target raster must have one channel, found {:?}",
                grid.channel_names()
            )));
        }
        Ok(Self {
            height: grid.height(),
            width: grid.width(),
            values: grid.data().to_vec(),
            kind,
        })
    }
}

/// Calls `f(index, distance^2)` for every pixel within `radius` of `center`.
/// Column offsets are taken relative to `floor(col)` so a whole-pixel shift of
/// the centre visits the same offsets with bit-identical distances.
fn splat(height: usize, width: usize, center: (f64, f64), radius: f64, wrap: bool, mut f: impl FnMut(usize, f64)) {
    let (row, col) = center;
    let r2 = radius * radius;
    let reach = radius.ceil() as isize + 1;
    let r_lo = ((row.floor() as isize) - reach).max(0);
    let r_hi = ((row.floor() as isize) + reach).min(height as isize - 1);
    let base = col.floor() as isize;
    let w = width as isize;
    let (o_lo, o_hi) = if wrap && 2 * reach + 1 > w {
        // the window would overlap itself; visit each column once at its nearest offset
        (-(w - 1) / 2, w / 2)
    } else {
        (-reach, reach)
    };
    for r in r_lo..=r_hi {
        let dr = r as f64 - row;
        for o in o_lo..=o_hi {
            let c = base + o;
            let cc = if wrap {
                c.rem_euclid(w)
            } else if (0..w).contains(&c) {
                c
            } else {
                continue;
            };
            let dc = c as f64 - col;
            let d2 = dr * dr + dc * dc;
            if d2 <= r2 {
                f(r as usize * width + cc as usize, d2);
            }
        }
    }
}

/// Per-keypoint widths under the configured mode.
pub fn gaussian_sigmas(kps: &KeypointSet, cfg: &GaussianMapConfig) -> Vec<f64> {
    match cfg.mode {
        SigmaMode::Fixed => vec![cfg.sigma; kps.len()],
        SigmaMode::Adaptive => nearest_neighbor_distances(kps, 1, cfg.wrap_azimuth)
            .into_iter()
            .map(|d| adaptive_sigma(d.first().copied(), cfg))
            .collect(),
    }
}

/// Sum of truncated `exp(-d^2 / 2 sigma^2)` kernels, divided by its maximum.
pub fn gaussian_map<T: Scalar>(kps: &KeypointSet, cfg: &GaussianMapConfig) -> Result<TargetMap<T>> {
    cfg.validate()?;
    let (h, w) = (kps.height, kps.width);
    let mut acc = vec![0.0f64; h * w];
    for (&p, sigma) in kps.points().iter().zip(gaussian_sigmas(kps, cfg)) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        splat(h, w, p, cfg.truncation_radius * sigma, cfg.wrap_azimuth, |i, d2| {
            acc[i] += (-d2 * inv).exp();
        });
    }
    let peak = acc.iter().copied().fold(0.0, f64::max);
    let values = if peak > 0.0 {
        acc.iter().map(|&v| lit(v / peak)).collect()
    } else {
        vec![T::zero(); h * w]
    };
    Ok(TargetMap {
        height: h,
        width: w,
        values,
        kind: MapKind::Gaussian,
    })
}

/// Per-keypoint widths `sum(k nearest distances) / f`. Missing neighbour
/// distances are replaced by the mean of the available ones; a keypoint with
/// no neighbours uses `fallback_sigma`.
pub fn density_sigmas(kps: &KeypointSet, cfg: &DensityMapConfig) -> Vec<f64> {
    nearest_neighbor_distances(kps, cfg.k_neighbors, cfg.wrap_azimuth)
        .into_iter()
        .map(|d| {
            if d.is_empty() {
                cfg.fallback_sigma
            } else {
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                (mean * cfg.k_neighbors as f64 / cfg.f).max(MIN_SIGMA)
            }
        })
        .collect()
}

/// Sum of Gaussian kernels, each renormalised to unit pixel mass.
pub fn density_map<T: Scalar>(kps: &KeypointSet, cfg: &DensityMapConfig) -> Result<TargetMap<T>> {
    cfg.validate()?;
    let (h, w) = (kps.height, kps.width);
    let mut acc = vec![0.0f64; h * w];
    let mut kernel: Vec<(usize, f64)> = Vec::new();
    for (&p, sigma) in kps.points().iter().zip(density_sigmas(kps, cfg)) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        kernel.clear();
        splat(h, w, p, cfg.truncation_radius * sigma, cfg.wrap_azimuth, |i, d2| {
            kernel.push((i, (-d2 * inv).exp()));
        });
        let mass: f64 = kernel.iter().map(|k| k.1).sum();
        for &(i, v) in &kernel {
            acc[i] += v / mass;
        }
    }
    Ok(TargetMap {
        height: h,
        width: w,
        values: acc.into_iter().map(lit).collect(),
        kind: MapKind::Density,
    })
}

/// On-disk annotation: `{height, width, delta, points: [[row, col], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub height: usize,
    pub width: usize,
    pub delta: f64,
    pub points: Vec<[f64; 2]>,
}

impl Annotation {
    pub fn from_keypoints(kps: &KeypointSet, delta: f64) -> Self {
        Self {
            height: kps.height,
            width: kps.width,
            delta,
            points: kps.points.iter().map(|&(r, c)| [r, c]).collect(),
        }
    }

    pub fn keypoints(&self) -> Result<KeypointSet> {
        KeypointSet::new(self.height, self.width, self.points.iter().map(|p| (p[0], p[1])).collect())
    }
}

pub fn read_annotation(path: &Path) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_annotation(path: &Path, ann: &Annotation) -> Result<()> {
    let text = serde_json::to_string_pretty(ann).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
