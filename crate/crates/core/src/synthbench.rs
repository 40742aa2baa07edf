//! Synthetic spheroids with spiral-arranged surface bumps and exact keypoint
//! ground truth.
//!
//! The surface is a radius field `r(theta, phi)` sampled on a fine angular
//! grid: an ellipsoid of revolution, times `1 + bumps`, times `1 + noise`.
//! Bumps and noise lumps share a raised-cosine profile with compact support.
//! The noise has a few broad low-amplitude lumps and many small ones, so the
//! radius channel carries spurious maxima next to the real features. Normals
//! come from finite differences of the field.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cartesian_to_spherical, write_ply, Point3, PointCloud, SurfaceSample};
use crate::projection::ProjectionConfig;
use crate::scalar::Scalar;
use crate::targetmaps::{write_annotation, Annotation, KeypointSet};

/// Angular step of the radius field, in degrees.
pub const FIELD_STEP: f64 = 0.25;
const BROAD_LUMPS: usize = 16;
const FINE_LUMPS: usize = 600;

/// Polar-angle range, in degrees, that receives features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBand {
    /// The rows kept by the ROI crop of the projection config.
    Roi,
    /// Explicit `[theta_min, theta_max]`.
    Theta([f64; 2]),
}

impl FeatureBand {
    pub fn resolve(self, proj: &ProjectionConfig) -> (f64, f64) {
        match self {
            FeatureBand::Roi => (proj.h_min * 180.0, proj.h_max * 180.0),
            FeatureBand::Theta([lo, hi]) => (lo, hi),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpheroidSpec {
    /// Equatorial radius.
    pub a: f64,
    /// Polar radius.
    pub c: f64,
    pub n_features: usize,
    pub spiral_divergence: f64,
    /// Bump height as a fraction of the local radius.
    pub bump_amplitude: f64,
    pub bump_angular_radius: f64,
    pub surface_noise: f64,
    pub sample_count: usize,
    pub feature_band: FeatureBand,
    pub seed: u64,
}

impl Default for SpheroidSpec {
    fn default() -> Self {
        Self {
            a: 1.0,
            c: 1.1,
            n_features: 250,
            spiral_divergence: 137.5,
            bump_amplitude: 0.03,
            bump_angular_radius: 2.5,
            surface_noise: 0.004,
            sample_count: 200_000,
            feature_band: FeatureBand::Theta([0.0, 180.0]),
            seed: 0,
        }
    }
}

impl SpheroidSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.a > 0.0 && self.c > 0.0) {
            return bad(format!("radii must be positive, got a={} c={}", self.a, self.c));
        }
        if !(0.0..0.3).contains(&self.bump_amplitude) {
            return bad(format!("bump_amplitude must lie in [0, 0.3), got {}", self.bump_amplitude));
        }
        if !(self.bump_angular_radius > 0.0 && self.bump_angular_radius < 45.0) {
            return bad(format!("bump_angular_radius must lie in (0, 45), got {}", self.bump_angular_radius));
        }
        if !(0.0..0.1).contains(&self.surface_noise) {
            return bad(format!("surface_noise must lie in [0, 0.1), got {}", self.surface_noise));
        }
        if self.sample_count < 10 * self.n_features || self.sample_count == 0 {
            return bad(format!(
                "sample_count {} must be positive and at least 10 x n_features ({})",
                self.sample_count, self.n_features
            ));
        }
        if let FeatureBand::Theta([lo, hi]) = self.feature_band {
            if !(0.0 <= lo && lo < hi && hi <= 180.0) {
                return bad(format!("feature band [{lo}, {hi}] must satisfy 0 <= lo < hi <= 180"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample<T> {
    pub cloud: PointCloud<T>,
    /// Surface points at the bump apexes, in the cloud's frame.
    pub feature_centers: Vec<Point3<f64>>,
    /// Feature centres inside the ROI, in cropped-raster pixel coordinates.
    pub keypoints: KeypointSet,
    /// Index into `feature_centers` for each keypoint.
    pub keypoint_features: Vec<usize>,
    pub spec: SpheroidSpec,
}

/// Directions of the spiral features: uniform in `cos(theta)` over the band,
/// azimuth advancing by the divergence angle from `phi0`.
pub fn spiral_directions(n: usize, band: (f64, f64), divergence: f64, phi0: f64) -> Vec<(f64, f64)> {
    let (clo, chi) = (band.0.to_radians().cos(), band.1.to_radians().cos());
    (0..n)
        .map(|i| {
            let ct = clo - (i as f64 + 0.5) / n as f64 * (clo - chi);
            let theta = ct.clamp(-1.0, 1.0).acos().to_degrees();
            let phi = (phi0 + i as f64 * divergence).rem_euclid(360.0) - 180.0;
            (theta, phi)
        })
        .collect()
}

fn unit(theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.to_radians().sin_cos();
    let (sp, cp) = phi.to_radians().sin_cos();
    [st * cp, st * sp, ct]
}

fn angle_between(u: [f64; 3], v: [f64; 3]) -> f64 {
    let d = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    d.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Rejects layouts whose closest bump pair leaves less than one radius of gap.
fn check_packing(dirs: &[(f64, f64)], radius: f64) -> Result<()> {
    let us: Vec<[f64; 3]> = dirs.iter().map(|&(t, p)| unit(t, p)).collect();
    let mut min = f64::INFINITY;
    for i in 0..us.len() {
        for j in 0..i {
            min = min.min(angle_between(us[i], us[j]));
        }
    }
    if min - 2.0 * radius < radius {
        return Err(Error::Packing(format!(
            "closest features are {min:.3} deg apart, bumps of radius {radius} deg need at least {:.3}",
            3.0 * radius
        )));
    }
    Ok(())
}

/// Radius field on a `(theta, phi)` grid; rows run over theta in `[0, 180]`,
/// columns over phi in `[-180, 180)` with periodic wrap.
struct Field {
    rows: usize,
    cols: usize,
    step: f64,
    sin_t: Vec<f64>,
    cos_t: Vec<f64>,
    sin_p: Vec<f64>,
    cos_p: Vec<f64>,
    values: Vec<f64>,
}

impl Field {
    fn new(step: f64) -> Self {
        let rows = (180.0 / step).round() as usize + 1;
        let cols = (360.0 / step).round() as usize;
        let (sin_t, cos_t) = (0..rows).map(|i| (i as f64 * step).to_radians().sin_cos()).unzip();
        let (sin_p, cos_p) = (0..cols)
            .map(|j| (-180.0 + j as f64 * step).to_radians().sin_cos())
            .unzip();
        Self {
            rows,
            cols,
            step,
            sin_t,
            cos_t,
            sin_p,
            cos_p,
            values: vec![0.0; rows * cols],
        }
    }

    /// Adds `amp * profile(gamma / radius)` around direction `(theta, phi)`.
    fn add_lump(&mut self, theta: f64, phi: f64, radius: f64, amp: f64) {
        let (stv, ctv) = theta.to_radians().sin_cos();
        let (spv, cpv) = phi.to_radians().sin_cos();
        let cos_r = radius.to_radians().cos();
        let r_lo = (((theta - radius) / self.step).floor().max(0.0)) as usize;
        let r_hi = ((((theta + radius) / self.step).ceil()) as usize).min(self.rows - 1);
        let half_pi_over_r = std::f64::consts::PI / radius;
        for i in r_lo..=r_hi {
            let (st, ct) = (self.sin_t[i], self.cos_t[i]);
            // columns whose angular distance can be within the radius
            let denom = st * stv;
            let span = if denom <= 1e-12 {
                None
            } else {
                let rhs = (cos_r - ct * ctv) / denom;
                if rhs > 1.0 {
                    continue;
                }
                (rhs > -1.0).then(|| rhs.acos().to_degrees())
            };
            let (j_lo, j_hi) = match span {
                Some(s) => {
                    let lo = ((phi - s + 180.0) / self.step).floor() as isize - 1;
                    let hi = ((phi + s + 180.0) / self.step).ceil() as isize + 1;
                    if hi - lo + 1 >= self.cols as isize {
                        (0, self.cols as isize - 1)
                    } else {
                        (lo, hi)
                    }
                }
                None => (0, self.cols as isize - 1),
            };
            for jj in j_lo..=j_hi {
                let j = jj.rem_euclid(self.cols as isize) as usize;
                let cos_dphi = self.cos_p[j] * cpv + self.sin_p[j] * spv;
                let d = (ct * ctv + st * stv * cos_dphi).clamp(-1.0, 1.0);
                if d < cos_r {
                    continue;
                }
                let gamma = d.acos().to_degrees();
                self.values[i * self.cols + j] += amp * 0.5 * (1.0 + (gamma * half_pi_over_r).cos());
            }
        }
    }

    /// Bilinear lookup of any per-node array at `(theta, phi)` in degrees.
    fn sample(&self, data: &[f64], theta: f64, phi: f64) -> f64 {
        let x = (theta / self.step).clamp(0.0, (self.rows - 1) as f64);
        let y = ((phi + 180.0) / self.step).rem_euclid(self.cols as f64);
        let (i0, j0) = (x.floor() as usize, y.floor() as usize);
        let i1 = (i0 + 1).min(self.rows - 1);
        let j1 = (j0 + 1) % self.cols;
        let (fx, fy) = (x - i0 as f64, y - j0 as f64);
        let at = |i: usize, j: usize| data[i * self.cols + j];
        (1.0 - fx) * ((1.0 - fy) * at(i0, j0) + fy * at(i0, j1)) + fx * ((1.0 - fy) * at(i1, j0) + fy * at(i1, j1))
    }
}

/// Projects feature centres into cropped-raster pixel coordinates after the
/// same centring the projection pipeline applies. Returns the keypoints and the
/// index of the feature behind each one.
pub fn project_keypoints(
    centers: &[Point3<f64>],
    centroid: Point3<f64>,
    proj: &ProjectionConfig,
) -> Result<(KeypointSet, Vec<usize>)> {
    proj.validate()?;
    let (h, w) = (proj.height(), proj.width());
    let (start, end) = proj.roi_rows(h);
    let mut points = Vec::new();
    let mut index = Vec::new();
    for (i, p) in centers.iter().enumerate() {
        let s = cartesian_to_spherical(p.sub(centroid));
        let cell = ((s.theta / proj.delta).floor().max(0.0) as usize).min(h - 1);
        if cell < start || cell >= end {
            continue;
        }
        let row = (s.theta / proj.delta - 0.5 - start as f64).max(0.0);
        let col = ((s.phi + 180.0) / proj.delta - 0.5).rem_euclid(w as f64);
        points.push((row.min((end - start) as f64 - 1e-3), col));
        index.push(i);
    }
    Ok((KeypointSet::new(end - start, w, points)?, index))
}

/// Builds one spheroid. Deterministic for a given spec.
pub fn generate_spheroid<T: Scalar>(spec: &SpheroidSpec, proj: &ProjectionConfig) -> Result<SyntheticSample<T>> {
    spec.validate()?;
    proj.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let band = spec.feature_band.resolve(proj);
    let phi0 = rng.gen_range(0.0..360.0);
    let dirs = spiral_directions(spec.n_features, band, spec.spiral_divergence, phi0);
    check_packing(&dirs, spec.bump_angular_radius)?;

    let mut bumps = Field::new(FIELD_STEP);
    for &(t, p) in &dirs {
        bumps.add_lump(t, p, spec.bump_angular_radius, spec.bump_amplitude);
    }
    let mut noise = Field::new(FIELD_STEP);
    if spec.surface_noise > 0.0 {
        let mut lump = |rng: &mut ChaCha8Rng, radius: (f64, f64), amp: f64| {
            let theta = rng.gen_range(-1.0f64..1.0).acos().to_degrees();
            let phi = rng.gen_range(-180.0..180.0);
            let r = rng.gen_range(radius.0..radius.1);
            let a = rng.gen_range(-amp..amp);
            noise.add_lump(theta, phi, r, a);
        };
        for _ in 0..BROAD_LUMPS {
            lump(&mut rng, (20.0, 45.0), 2.0 * spec.surface_noise);
        }
        for _ in 0..FINE_LUMPS {
            lump(&mut rng, (1.5, 3.0), spec.surface_noise);
        }
    }

    let mut field = Field::new(FIELD_STEP);
    let (ia2, ic2) = (1.0 / (spec.a * spec.a), 1.0 / (spec.c * spec.c));
    for i in 0..field.rows {
        let (st, ct) = (field.sin_t[i], field.cos_t[i]);
        let base = 1.0 / (st * st * ia2 + ct * ct * ic2).sqrt();
        for j in 0..field.cols {
            let k = i * field.cols + j;
            field.values[k] = base * (1.0 + bumps.values[k]) * (1.0 + noise.values[k]);
        }
    }
    // derivatives per radian, central differences (one-sided at the poles)
    let (rows, cols) = (field.rows, field.cols);
    let inv2h = 1.0 / (2.0 * FIELD_STEP.to_radians());
    let mut d_theta = vec![0.0; rows * cols];
    let mut d_phi = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let at = |ii: usize, jj: usize| field.values[ii * cols + jj];
            d_theta[i * cols + j] = match i {
                0 => (at(1, j) - at(0, j)) * 2.0 * inv2h,
                i if i == rows - 1 => (at(i, j) - at(i - 1, j)) * 2.0 * inv2h,
                i => (at(i + 1, j) - at(i - 1, j)) * inv2h,
            };
            d_phi[i * cols + j] = (at(i, (j + 1) % cols) - at(i, (j + cols - 1) % cols)) * inv2h;
        }
    }

    let mut samples = Vec::with_capacity(spec.sample_count);
    for _ in 0..spec.sample_count {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(-180.0..180.0);
        let theta = z.acos().to_degrees();
        let r = field.sample(&field.values, theta, phi);
        let rt = field.sample(&d_theta, theta, phi);
        let rp = field.sample(&d_phi, theta, phi);
        let (st, ct) = theta.to_radians().sin_cos();
        let (sp, cp) = phi.to_radians().sin_cos();
        let u = Point3::new(st * cp, st * sp, ct);
        let e_theta = Point3::new(ct * cp, ct * sp, -st);
        let e_phi = Point3::new(-sp, cp, 0.0);
        let n = u
            .sub(e_theta.scale(rt / r))
            .sub(e_phi.scale(rp / (r * st.max(1e-6))));
        samples.push(SurfaceSample {
            position: u.scale(r).cast(),
            normal: n.normalized().unwrap_or(u).cast(),
        });
    }
    let cloud = PointCloud::new(samples);
    let feature_centers: Vec<Point3<f64>> = dirs
        .iter()
        .map(|&(t, p)| {
            let u = unit(t, p);
            Point3::new(u[0], u[1], u[2]).scale(field.sample(&field.values, t, p))
        })
        .collect();
    let centroid = cloud.centroid()?.cast::<f64>();
    let (keypoints, keypoint_features) = project_keypoints(&feature_centers, centroid, proj)?;
    Ok(SyntheticSample {
        cloud,
        feature_centers,
        keypoints,
        keypoint_features,
        spec: *spec,
    })
}

/// Uniform ranges the per-sample specs are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecRanges {
    pub a: [f64; 2],
    pub c: [f64; 2],
    pub n_features: [usize; 2],
    pub bump_amplitude: [f64; 2],
    pub bump_angular_radius: [f64; 2],
    pub surface_noise: [f64; 2],
    pub sample_count: usize,
    pub spiral_divergence: f64,
    pub feature_band: FeatureBand,
}

impl Default for SpecRanges {
    fn default() -> Self {
        Self {
            a: [0.9, 1.1],
            c: [0.95, 1.3],
            n_features: [150, 350],
            bump_amplitude: [0.025, 0.04],
            bump_angular_radius: [2.2, 2.8],
            surface_noise: [0.003, 0.006],
            sample_count: 200_000,
            spiral_divergence: 137.5,
            feature_band: FeatureBand::Theta([0.0, 180.0]),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

impl SpecRanges {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> SpheroidSpec {
        SpheroidSpec {
            a: draw(rng, self.a),
            c: draw(rng, self.c),
            n_features: rng.gen_range(self.n_features[0]..=self.n_features[1].max(self.n_features[0])),
            spiral_divergence: self.spiral_divergence,
            bump_amplitude: draw(rng, self.bump_amplitude),
            bump_angular_radius: draw(rng, self.bump_angular_radius),
            surface_noise: draw(rng, self.surface_noise),
            sample_count: self.sample_count,
            feature_band: self.feature_band,
            seed: rng.gen(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub name: String,
    pub spec: SpheroidSpec,
    pub keypoints_in_roi: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub ranges: SpecRanges,
    pub projection: ProjectionConfig,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn mean_features(&self) -> f64 {
        self.samples.iter().map(|s| s.spec.n_features as f64).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// Maximum spec redraws per sample after a packing failure.
pub const MAX_RETRIES: usize = 10;

/// Draws `n` specs from `ranges` and generates each spheroid. Samples are
/// generated in parallel; results do not depend on the thread count.
pub fn generate_dataset<T: Scalar>(
    n: usize,
    ranges: &SpecRanges,
    proj: &ProjectionConfig,
    seed: u64,
) -> Result<(Vec<SyntheticSample<T>>, DatasetManifest)> {
    use rayon::prelude::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // every retry draw is taken up front so the stream does not depend on outcomes
    let candidates: Vec<Vec<SpheroidSpec>> = (0..n)
        .map(|_| (0..=MAX_RETRIES).map(|_| ranges.draw(&mut rng)).collect())
        .collect();
    let samples = candidates
        .par_iter()
        .map(|specs| {
            let mut last = None;
            for spec in specs {
                match generate_spheroid::<T>(spec, proj) {
                    Ok(s) => return Ok(s),
                    Err(e @ Error::Packing(_)) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        seed,
        ranges: *ranges,
        projection: *proj,
        samples: samples
            .iter()
            .enumerate()
            .map(|(index, s)| ManifestEntry {
                index,
                name: format!("{index:03}"),
                spec: s.spec,
                keypoints_in_roi: s.keypoints.len(),
            })
            .collect(),
    };
    Ok((samples, manifest))
}

/// Writes `NNN.ply`, `NNN.json` and `manifest.json` into `dir`.
pub fn write_dataset<T: Scalar>(dir: &Path, samples: &[SyntheticSample<T>], manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, entry) in samples.iter().zip(&manifest.samples) {
        let cloud: PointCloud<f32> = PointCloud::new(
            s.cloud
                .samples
                .iter()
                .map(|p| SurfaceSample {
                    position: p.position.cast(),
                    normal: p.normal.cast(),
                })
                .collect(),
        );
        write_ply(&dir.join(format!("{}.ply", entry.name)), &cloud)?;
        write_annotation(
            &dir.join(format!("{}.json", entry.name)),
            &Annotation::from_keypoints(&s.keypoints, manifest.projection.delta),
        )?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// `(mesh, annotation)` path pairs of a dataset directory, sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "ply" && ext != "obj" {
            continue;
        }
        let ann = path.with_extension("json");
        if ann.exists() {
            out.push((path, ann));
        }
    }
    out.sort();
    Ok(out)
}
