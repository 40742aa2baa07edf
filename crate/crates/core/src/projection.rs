//! Equirectangular unwrapping of a centred point cloud into a multi-channel
//! raster, cubic hole filling, ROI cropping and the circular-shift primitive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{write_name, Reader, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{cartesian_to_spherical, PointCloud};
use crate::scalar::{lit, Scalar};

pub const SMR_MAGIC: &[u8; 4] = b"SMR1";

pub const CH_NX: usize = 0;
pub const CH_NY: usize = 1;
pub const CH_NZ: usize = 2;
pub const CH_RHO: usize = 3;
pub const CH_OCCUPANCY: usize = 4;
pub const SURFACE_CHANNELS: [&str; 5] = ["nx", "ny", "nz", "rho", "occupancy"];

/// Minimum number of rows a cropped ROI may have.
pub const MIN_ROI_HEIGHT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Angular increment in degrees.
    pub delta: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub wrap_azimuth: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            h_min: 0.235,
            h_max: 0.765,
            wrap_azimuth: true,
        }
    }
}

/// `v` as an integer when it is one up to float noise.
fn as_whole(v: f64) -> Option<usize> {
    let r = v.round();
    ((v - r).abs() < 1e-9 * v.abs().max(1.0) && r >= 1.0).then_some(r as usize)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || as_whole(180.0 / self.delta).is_none() || as_whole(360.0 / self.delta).is_none() {
            return Err(Error::InvalidConfig(format!(
                "delta = {} must divide 180 and 360 into whole pixel counts",
                self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.h_min) || !(self.h_min < self.h_max && self.h_max <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ROI fractions must satisfy 0 <= h_min < h_max <= 1, got {} and {}",
                self.h_min, self.h_max
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        as_whole(180.0 / self.delta).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        as_whole(360.0 / self.delta).unwrap_or(0)
    }

    /// Half-open row range `[floor(h_min * H), ceil(h_max * H))`.
    pub fn roi_rows(&self, height: usize) -> (usize, usize) {
        let h = height as f64;
        let start = snap(self.h_min * h).floor() as usize;
        let end = (snap(self.h_max * h).ceil() as usize).min(height);
        (start, end.max(start))
    }
}

/// `H x W x C` image, row-major with channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterGrid<T> {
    height: usize,
    width: usize,
    channels: Vec<String>,
    data: Vec<T>,
}

impl<T: Scalar> RasterGrid<T> {
    pub fn new(height: usize, width: usize, channels: &[&str]) -> Self {
        Self {
            height,
            width,
            channels: channels.iter().map(|s| s.to_string()).collect(),
            data: vec![T::zero(); height * width * channels.len()],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: Vec<String>, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels.len() {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{} raster",
                data.len(),
                channels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Single-channel raster from a row-major plane.
    pub fn from_plane(height: usize, width: usize, name: &str, plane: Vec<T>) -> Result<Self> {
        Self::from_data(height, width, vec![name.to_string()], plane)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels.len() + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.idx(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        let i = self.idx(row, col, ch);
        self.data[i] = v;
    }

    /// Copy of one channel as a row-major plane.
    pub fn plane(&self, ch: usize) -> Vec<T> {
        let c = self.channels.len();
        self.data.iter().skip(ch).step_by(c).copied().collect()
    }

    pub fn channel_sum(&self, ch: usize) -> f64 {
        self.data.iter().skip(ch).step_by(self.channels.len()).map(|v| v.as_f64()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> RasterGrid<U> {
        RasterGrid {
            height: self.height,
            width: self.width,
            channels: self.channels.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    fn require_surface(&self) -> Result<()> {
        if self.channels.len() < SURFACE_CHANNELS.len()
            || self.channels[..SURFACE_CHANNELS.len()].iter().zip(SURFACE_CHANNELS).any(|(a, b)| a != b)
        {
            return Err(Error::shape(format!(
                "expected surface channels {SURFACE_CHANNELS:?}, found {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Bins every sample into its `(theta, phi)` cell. Cells hit by several samples
/// hold the mean radius and the renormalised mean normal.
pub fn project_equirectangular<T: Scalar>(cloud: &PointCloud<T>, cfg: &ProjectionConfig) -> Result<RasterGrid<T>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    let (h, w) = (cfg.height(), cfg.width());
    // nx, ny, nz, rho, count
    let mut acc = vec![[0.0f64; 5]; h * w];
    for s in &cloud.samples {
        let sp = cartesian_to_spherical(s.position);
        let row = ((sp.theta.as_f64() / cfg.delta).floor().max(0.0) as usize).min(h - 1);
        let col = (((sp.phi.as_f64() + 180.0) / cfg.delta).floor().max(0.0) as usize).min(w - 1);
        let a = &mut acc[row * w + col];
        a[0] += s.normal.x.as_f64();
        a[1] += s.normal.y.as_f64();
        a[2] += s.normal.z.as_f64();
        a[3] += sp.rho.as_f64();
        a[4] += 1.0;
    }
    let mut grid = RasterGrid::new(h, w, &SURFACE_CHANNELS);
    for (i, a) in acc.iter().enumerate() {
        if a[4] == 0.0 {
            continue;
        }
        let (r, c) = (i / w, i % w);
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        // opposing normals cancel only in pathological inputs; keep the cell empty-normal then
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        grid.set(r, c, CH_NX, lit(a[0] * inv));
        grid.set(r, c, CH_NY, lit(a[1] * inv));
        grid.set(r, c, CH_NZ, lit(a[2] * inv));
        grid.set(r, c, CH_RHO, lit(a[3] / a[4]));
        grid.set(r, c, CH_OCCUPANCY, T::one());
    }
    Ok(grid)
}

/// Fills the unknown entries of one line in place. Returns `false` if the line
/// has no known entries at all.
fn fill_line(values: &mut [f64], known: &[bool], wrap: bool) -> bool {
    let n = values.len();
    let ks: Vec<usize> = (0..n).filter(|&i| known[i]).collect();
    if ks.is_empty() {
        return false;
    }
    if ks.len() == n {
        return true;
    }
    let m = ks.len();
    if m < 4 {
        for i in 0..n {
            if known[i] {
                continue;
            }
            let nearest = ks
                .iter()
                .copied()
                .min_by_key(|&k| {
                    let d = i.abs_diff(k);
                    if wrap {
                        d.min(n - d)
                    } else {
                        d
                    }
                })
                .expect("non-empty");
            values[i] = values[nearest];
        }
        return true;
    }
    // knots reference known entries only, which are never written below
    let src = values.to_vec();
    // knot j of the (possibly wrapped) known sequence as (position, value)
    let knot = |j: isize| -> Option<(f64, f64)> {
        if !wrap && !(0..m as isize).contains(&j) {
            return None;
        }
        let laps = j.div_euclid(m as isize);
        let k = ks[j.rem_euclid(m as isize) as usize];
        Some((k as f64 + laps as f64 * n as f64, src[k]))
    };
    for i in 0..n {
        if known[i] {
            continue;
        }
        let j = ks.partition_point(|&k| k < i) as isize;
        let (left, right) = (knot(j - 1), knot(j));
        let (p1, p2) = match (left, right) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => {
                values[i] = a.1;
                continue;
            }
            (None, Some(b)) => {
                values[i] = b.1;
                continue;
            }
            (None, None) => unreachable!("at least four knots"),
        };
        let p0 = knot(j - 2);
        let p3 = knot(j + 1);
        // finite-difference tangents on the non-uniform knot spacing
        let m1 = match p0 {
            Some(p0) => (p2.1 - p0.1) / (p2.0 - p0.0),
            None => (p2.1 - p1.1) / (p2.0 - p1.0),
        };
        let m2 = match p3 {
            Some(p3) => (p3.1 - p1.1) / (p3.0 - p1.0),
            None => (p2.1 - p1.1) / (p2.0 - p1.0),
        };
        let mut t = i as f64;
        if t < p1.0 {
            t += n as f64;
        }
        let h = p2.0 - p1.0;
        let s = (t - p1.0) / h;
        let (s2, s3) = (s * s, s * s * s);
        values[i] = (2.0 * s3 - 3.0 * s2 + 1.0) * p1.1
            + (s3 - 2.0 * s2 + s) * h * m1
            + (-2.0 * s3 + 3.0 * s2) * p2.1
            + (s3 - s2) * h * m2;
    }
    true
}

/// Fills unoccupied cells by Catmull-Rom interpolation along rows (wrapping
/// across the seam when `wrap_azimuth`), then along columns. Occupied cells
/// and the occupancy channel are left untouched; cells no pass can reach keep
/// zero normals and zero radius.
pub fn fill_holes_cubic<T: Scalar>(grid: &RasterGrid<T>, wrap_azimuth: bool) -> Result<RasterGrid<T>> {
    grid.require_surface()?;
    let (h, w) = (grid.height, grid.width);
    let mut filled: Vec<bool> = (0..h * w)
        .map(|i| grid.get(i / w, i % w, CH_OCCUPANCY) > T::zero())
        .collect();
    if !filled.iter().any(|&f| f) {
        return Err(Error::EmptyInput("raster has no occupied cells"));
    }
    let mut out = grid.clone();
    let chans = [CH_NX, CH_NY, CH_NZ, CH_RHO];
    let mut line = vec![0.0f64; w.max(h)];

    let mut row_done = vec![false; h];
    for r in 0..h {
        let known = &filled[r * w..(r + 1) * w];
        for &ch in &chans {
            for c in 0..w {
                line[c] = out.get(r, c, ch).as_f64();
            }
            row_done[r] = fill_line(&mut line[..w], known, wrap_azimuth);
            if row_done[r] {
                for c in 0..w {
                    out.set(r, c, ch, lit(line[c]));
                }
            }
        }
    }
    for r in 0..h {
        if row_done[r] {
            filled[r * w..(r + 1) * w].iter_mut().for_each(|f| *f = true);
        }
    }
    if row_done.iter().any(|d| !d) {
        let mut known = vec![false; h];
        for c in 0..w {
            for r in 0..h {
                known[r] = filled[r * w + c];
            }
            for &ch in &chans {
                for r in 0..h {
                    line[r] = out.get(r, c, ch).as_f64();
                }
                fill_line(&mut line[..h], &known, false);
                for r in 0..h {
                    out.set(r, c, ch, lit(line[r]));
                }
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            if grid.get(r, c, CH_OCCUPANCY) > T::zero() {
                continue;
            }
            let n = [CH_NX, CH_NY, CH_NZ].map(|ch| out.get(r, c, ch).as_f64());
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 0.0 {
                for (k, ch) in [CH_NX, CH_NY, CH_NZ].into_iter().enumerate() {
                    out.set(r, c, ch, lit(n[k] / len));
                }
            }
        }
    }
    Ok(out)
}

/// Rows `[floor(h_min * H), ceil(h_max * H))`, all channels, full width.
pub fn crop_roi<T: Scalar>(grid: &RasterGrid<T>, cfg: &ProjectionConfig) -> Result<RasterGrid<T>> {
    let (start, end) = cfg.roi_rows(grid.height);
    if end - start < MIN_ROI_HEIGHT {
        return Err(Error::RoiTooSmall { height: end - start });
    }
    let row_len = grid.width * grid.channels.len();
    Ok(RasterGrid {
        height: end - start,
        width: grid.width,
        channels: grid.channels.clone(),
        data: grid.data[start * row_len..end * row_len].to_vec(),
    })
}

/// Cyclic shift along the width: column `c` moves to `(c + offset) mod W`.
pub fn circular_shift<T: Scalar>(grid: &RasterGrid<T>, offset: usize) -> RasterGrid<T> {
    let (w, c) = (grid.width, grid.channels.len());
    if w == 0 {
        return grid.clone();
    }
    let k = offset % w;
    let mut data = Vec::with_capacity(grid.data.len());
    for r in 0..grid.height {
        let row = &grid.data[r * w * c..(r + 1) * w * c];
        // out[col] = in[col - k]
        data.extend_from_slice(&row[(w - k) * c..]);
        data.extend_from_slice(&row[..(w - k) * c]);
    }
    RasterGrid {
        height: grid.height,
        width: w,
        channels: grid.channels.clone(),
        data,
    }
}

/// Same shift on a row-major single-channel plane.
pub fn circular_shift_plane<T: Copy>(plane: &[T], width: usize, offset: usize) -> Vec<T> {
    if width == 0 {
        return plane.to_vec();
    }
    let k = offset % width;
    let mut out = Vec::with_capacity(plane.len());
    for row in plane.chunks(width) {
        out.extend_from_slice(&row[width - k..]);
        out.extend_from_slice(&row[..width - k]);
    }
    out
}

/// `3 x H x W` network input: each normal component mapped by `(v + 1) / 2`.
/// Cells without any normal come out as 0.5.
pub fn normalize_input_channels<T: Scalar>(grid: &RasterGrid<T>) -> Result<Tensor<T>> {
    grid.require_surface()?;
    let (h, w) = (grid.height, grid.width);
    let half: T = lit(0.5);
    let mut data = vec![T::zero(); 3 * h * w];
    for (k, ch) in [CH_NX, CH_NY, CH_NZ].into_iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let v = (grid.get(r, c, ch) + T::one()) * half;
                data[(k * h + r) * w + c] = v.max(T::zero()).min(T::one());
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn encode_raster<T: Scalar>(grid: &RasterGrid<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + grid.data.len() * 4);
    out.extend_from_slice(SMR_MAGIC);
    for v in [grid.height, grid.width, grid.channels.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for name in &grid.channels {
        write_name(&mut out, name)?;
    }
    for v in &grid.data {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raster<T: Scalar>(bytes: &[u8]) -> Result<RasterGrid<T>> {
    let mut r = Reader::new(bytes, "SMR1 raster");
    if r.take(4)? != SMR_MAGIC {
        return Err(r.err("bad magic"));
    }
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let channels = (0..c).map(|_| r.name()).collect::<Result<Vec<_>>>()?;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| r.err("dimensions overflow"))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("dimensions overflow"))?)?;
    if !r.is_done() {
        return Err(r.err("trailing bytes"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
        .collect();
    RasterGrid::from_data(h, w, channels, data)
}

pub fn write_raster<T: Scalar>(path: &Path, grid: &RasterGrid<T>) -> Result<()> {
    std::fs::write(path, encode_raster(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_raster<T: Scalar>(path: &Path) -> Result<RasterGrid<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

/// Grayscale PNG of one channel, min-max scaled to 0..=255.
pub fn export_png<T: Scalar>(grid: &RasterGrid<T>, channel: usize, path: &Path) -> Result<()> {
    if channel >= grid.channels.len() {
        return Err(Error::shape(format!(
            "channel {channel} out of range for {} channels",
            grid.channels.len()
        )));
    }
    let plane: Vec<f64> = grid.plane(channel).iter().map(|v| v.as_f64()).collect();
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = plane
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(grid.width as u32, grid.height as u32, pixels)
        .ok_or_else(|| Error::shape("raster too large for PNG"))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, SurfaceSample};
    use proptest::prelude::*;

    fn surface(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> RasterGrid<f64> {
        let mut g = RasterGrid::new(h, w, &SURFACE_CHANNELS);
        for r in 0..h {
            for c in 0..w {
                if let Some(v) = f(r, c) {
                    g.set(r, c, CH_NZ, 1.0);
                    g.set(r, c, CH_RHO, v);
                    g.set(r, c, CH_OCCUPANCY, 1.0);
                }
            }
        }
        g
    }

    #[test]
    fn raster_dimensions() {
        for (delta, h, w) in [(1.0, 180, 360), (0.5, 360, 720), (2.0, 90, 180)] {
            let cfg = ProjectionConfig { delta, ..Default::default() };
            cfg.validate().unwrap();
            assert_eq!((cfg.height(), cfg.width()), (h, w));
        }
        assert!(ProjectionConfig { delta: 0.7, ..Default::default() }.validate().is_err());
        assert!(ProjectionConfig { h_min: 0.8, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn roi_rows() {
        let cfg = ProjectionConfig::default();
        assert_eq!(cfg.roi_rows(360), (84, 276));
        assert_eq!(cfg.roi_rows(180), (42, 138));
        let full = ProjectionConfig { h_min: 0.0, h_max: 1.0, ..Default::default() };
        let g = surface(20, 8, |r, c| Some((r * 8 + c) as f64));
        assert_eq!(crop_roi(&g, &full).unwrap(), g);
        let thin = ProjectionConfig { h_min: 0.5, h_max: 0.6, ..Default::default() };
        assert!(matches!(crop_roi(&g, &thin), Err(Error::RoiTooSmall { height: 2 })));
    }

    #[test]
    fn projection_bins_and_averages() {
        let mk = |x: f64, y: f64, z: f64| SurfaceSample {
            position: Point3::new(x, y, z),
            normal: Point3::new(x, y, z).normalized().unwrap(),
        };
        let cloud = PointCloud::new(vec![mk(1.0, 0.0, 0.0), mk(3.0, 0.0, 0.0), mk(0.0, 0.0, 2.0)]);
        let g = project_equirectangular(&cloud, &ProjectionConfig::default()).unwrap();
        assert_eq!((g.height(), g.width()), (180, 360));
        assert_eq!(g.get(90, 180, CH_RHO), 2.0);
        assert_eq!(g.get(90, 180, CH_NX), 1.0);
        assert_eq!(g.get(0, 180, CH_OCCUPANCY), 1.0);
        assert_eq!(g.channel_sum(CH_OCCUPANCY), 2.0);
        assert!(matches!(
            project_equirectangular(&PointCloud::<f64>::default(), &ProjectionConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn fill_is_noop_without_holes() {
        let g = surface(6, 10, |r, c| Some((r + c) as f64));
        assert_eq!(fill_holes_cubic(&g, true).unwrap(), g);
    }

    #[test]
    fn fill_constant_neighbours() {
        let g = surface(4, 12, |r, c| (!(r == 2 && c == 5)).then_some(3.25));
        let f = fill_holes_cubic(&g, true).unwrap();
        assert_eq!(f.get(2, 5, CH_RHO), 3.25);
        assert_eq!(f.get(2, 5, CH_NZ), 1.0);
        assert_eq!(f.get(2, 5, CH_OCCUPANCY), 0.0);
    }

    #[test]
    fn fill_sparse_rows_and_empty_rows() {
        // row 0 has two samples (nearest fill), row 1 none (column pass), row 2 full
        let g = surface(3, 10, |r, c| match r {
            0 => [2, 7].contains(&c).then_some(c as f64),
            1 => None,
            _ => Some(5.0),
        });
        let f = fill_holes_cubic(&g, true).unwrap();
        assert_eq!(f.get(0, 3, CH_RHO), 2.0);
        assert_eq!(f.get(0, 0, CH_RHO), 2.0);
        assert_eq!(f.get(0, 9, CH_RHO), 7.0);
        assert!(f.get(1, 4, CH_RHO) > 0.0);
        let empty = RasterGrid::<f64>::new(3, 4, &SURFACE_CHANNELS);
        assert!(matches!(fill_holes_cubic(&empty, true), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn fill_wraps_across_seam() {
        let w = 16;
        let g = surface(1, w, |_, c| (c != 0 && c != w - 1).then_some(1.0 + (c as f64 * 0.1).sin()));
        let wrapped = fill_holes_cubic(&g, true).unwrap();
        let open = fill_holes_cubic(&g, false).unwrap();
        assert_eq!(open.get(0, 0, CH_RHO), g.get(0, 1, CH_RHO));
        assert_ne!(wrapped.get(0, 0, CH_RHO), open.get(0, 0, CH_RHO));
    }

    #[test]
    fn fill_reconstructs_sinusoid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = 360;
        let amp = 0.2;
        let truth = |c: usize| 1.0 + amp * (2.0 * std::f64::consts::PI * 3.0 * c as f64 / w as f64).sin();
        let mut mask = vec![true; w];
        let mut c = 0;
        while c < w {
            // holes of at most two pixels, roughly 20% coverage
            if rng.gen::<f64>() < 0.14 {
                let len = rng.gen_range(1..=2);
                for k in c..(c + len).min(w) {
                    mask[k] = false;
                }
                c += len + 1;
            } else {
                c += 1;
            }
        }
        let holes = mask.iter().filter(|m| !**m).count();
        assert!(holes > 40, "{holes}");
        let g = surface(1, w, |_, c| mask[c].then(|| truth(c)));
        let f = fill_holes_cubic(&g, true).unwrap();
        let err = (0..w).map(|c| (f.get(0, c, CH_RHO) - truth(c)).abs()).fold(0.0, f64::max);
        assert!(err < 0.01 * amp, "{err}");
    }

    #[test]
    fn normalisation_maps_components() {
        let mut g = RasterGrid::<f64>::new(1, 3, &SURFACE_CHANNELS);
        g.set(0, 0, CH_NZ, 1.0);
        g.set(0, 1, CH_NX, -1.0);
        let t = normalize_input_channels(&g).unwrap();
        let at = |k: usize, c: usize| t.data()[k * 3 + c];
        assert_eq!((at(0, 0), at(1, 0), at(2, 0)), (0.5, 0.5, 1.0));
        assert_eq!((at(0, 1), at(1, 1), at(2, 1)), (0.0, 0.5, 0.5));
        assert_eq!((at(0, 2), at(1, 2), at(2, 2)), (0.5, 0.5, 0.5));
    }

    #[test]
    fn png_export() {
        let dir = tempfile::tempdir().unwrap();
        let g = surface(4, 8, |r, c| Some((r * c) as f64));
        let p = dir.path().join("rho.png");
        export_png(&g, CH_RHO, &p).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (8, 4));
        assert_eq!(img.get_pixel(7, 3).0[0], 255);
        assert!(export_png(&g, 9, &p).is_err());
    }

    proptest! {
        #[test]
        fn shift_preserves_sums_and_inverts(
            h in 1usize..6, w in 1usize..12, offset in 0usize..12, seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = surface(h, w, |_, _| rng.gen_bool(0.7).then(|| rng.gen_range(0.5..2.0)));
            let s = circular_shift(&g, offset);
            for ch in 0..5 {
                prop_assert!((s.channel_sum(ch) - g.channel_sum(ch)).abs() < 1e-9);
            }
            prop_assert_eq!(circular_shift(&s, w - offset % w), g.clone());
            prop_assert_eq!(s.get(0, offset % w, CH_RHO), g.get(0, 0, CH_RHO));
            prop_assert_eq!(s.plane(CH_RHO), circular_shift_plane(&g.plane(CH_RHO), w, offset));
        }

        #[test]
        fn raster_round_trip(h in 1usize..5, w in 1usize..7, vals in proptest::collection::vec(-1e3f32..1e3, 70)) {
            let n = h * w * 2;
            let g = RasterGrid::from_data(h, w, vec!["a".into(), "bb".into()], vals[..n].to_vec()).unwrap();
            let back: RasterGrid<f32> = decode_raster(&encode_raster(&g).unwrap()).unwrap();
            prop_assert_eq!(back, g);
        }
    }

    #[test]
    fn raster_decode_rejects_damage() {
        let g = surface(2, 3, |_, _| Some(1.0));
        let bytes = encode_raster(&g).unwrap();
        assert!(decode_raster::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_raster::<f32>(&bad).is_err());
    }
}
