//! Counting from predicted maps: threshold + connected components for
//! likelihood maps, integration for density maps, and the NMS baseline on the
//! radial channel.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::RasterGrid;
use crate::scalar::Scalar;
use crate::targetmaps::TargetMap;

/// Relative margin a pixel must clear to count as a strict local maximum.
pub const MAXIMUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl BinaryMap {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count_true(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// `value > p_t`, strictly.
pub fn binarize<T: Scalar>(map: &TargetMap<T>, p_t: f64) -> BinaryMap {
    let t = T::from_f64_lossy(p_t);
    BinaryMap {
        height: map.height,
        width: map.width,
        cells: map.values.iter().map(|&v| v > t).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    /// Member pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        match self.rank[a as usize].cmp(&self.rank[b as usize]) {
            Ordering::Less => self.parent[a as usize] = b,
            Ordering::Greater => self.parent[b as usize] = a,
            Ordering::Equal => {
                self.parent[b as usize] = a;
                self.rank[a as usize] += 1;
            }
        }
    }
}

/// Column centroid that respects the seam: a circular mean picks the
/// reference, then columns are unwrapped around it and averaged.
fn column_centroid(cols: impl Iterator<Item = usize> + Clone, width: usize, wrap: bool) -> f64 {
    let n = cols.clone().count() as f64;
    if !wrap {
        return cols.map(|c| c as f64).sum::<f64>() / n;
    }
    let w = width as f64;
    let k = std::f64::consts::TAU / w;
    let (s, c) = cols
        .clone()
        .fold((0.0, 0.0), |(s, c), col| (s + (col as f64 * k).sin(), c + (col as f64 * k).cos()));
    let reference = (s.atan2(c) / k).rem_euclid(w);
    let mean = cols
        .map(|col| {
            let d = col as f64 - reference;
            reference + d - w * (d / w).round()
        })
        .sum::<f64>()
        / n;
    mean.rem_euclid(w)
}

/// 8-connected components; with `wrap_azimuth` the first and last columns
/// are adjacent. Clusters are ordered by their first pixel in raster order.
pub fn connected_components(bin: &BinaryMap, wrap_azimuth: bool) -> Vec<Cluster> {
    let (h, w) = (bin.height, bin.width);
    let mut uf = UnionFind::new(h * w);
    let idx = |r: usize, c: usize| (r * w + c) as u32;
    for r in 0..h {
        for c in 0..w {
            if !bin.get(r, c) {
                continue;
            }
            // previously visited neighbours: W, NW, N, NE
            let mut link = |rr: usize, cc: isize| {
                let cc = if wrap_azimuth {
                    cc.rem_euclid(w as isize)
                } else if (0..w as isize).contains(&cc) {
                    cc
                } else {
                    return;
                } as usize;
                if bin.get(rr, cc) {
                    uf.union(idx(r, c), idx(rr, cc));
                }
            };
            let ci = c as isize;
            if c > 0 || wrap_azimuth {
                link(r, ci - 1);
            }
            if r > 0 {
                link(r - 1, ci - 1);
                link(r - 1, ci);
                link(r - 1, ci + 1);
            }
        }
        if wrap_azimuth && w > 1 && bin.get(r, w - 1) && bin.get(r, 0) {
            uf.union(idx(r, w - 1), idx(r, 0));
        }
    }
    let mut label_of_root: Vec<u32> = vec![u32::MAX; h * w];
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !bin.get(r, c) {
                continue;
            }
            let root = uf.find(idx(r, c)) as usize;
            if label_of_root[root] == u32::MAX {
                label_of_root[root] = groups.len() as u32;
                groups.push(Vec::new());
            }
            groups[label_of_root[root] as usize].push((r, c));
        }
    }
    groups
        .into_iter()
        .map(|pixels| {
            let n = pixels.len() as f64;
            let row = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let col = column_centroid(pixels.iter().map(|p| p.1), w, wrap_azimuth);
            Cluster {
                pixels,
                centroid: (row, col),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub count: f64,
    pub centers: Vec<[f64; 2]>,
    pub method: String,
    pub p_t: Option<f64>,
}

impl CountResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Binarise, label, drop clusters smaller than `min_cluster_size`.
pub fn count_from_gaussian<T: Scalar>(
    map: &TargetMap<T>,
    p_t: f64,
    min_cluster_size: usize,
    wrap_azimuth: bool,
) -> CountResult {
    let clusters = connected_components(&binarize(map, p_t), wrap_azimuth);
    let centers: Vec<[f64; 2]> = clusters
        .iter()
        .filter(|c| c.size() >= min_cluster_size.max(1))
        .map(|c| [c.centroid.0, c.centroid.1])
        .collect();
    CountResult {
        count: centers.len() as f64,
        centers,
        method: "gaussian".into(),
        p_t: Some(p_t),
    }
}

/// Pixel sum with negative predictions clamped to zero; also returns how many
/// pixels were clamped.
pub fn count_from_density<T: Scalar>(map: &TargetMap<T>) -> (CountResult, usize) {
    let mut clamped = 0;
    let mut sum = 0.0f64;
    for &v in &map.values {
        let v = v.as_f64();
        if v < 0.0 {
            clamped += 1;
        } else {
            sum += v;
        }
    }
    (
        CountResult {
            count: sum,
            centers: Vec::new(),
            method: "density".into(),
            p_t: None,
        },
        clamped,
    )
}

/// Intersection over union of two circles of equal `radius` whose centres are
/// `d` apart.
pub fn circle_iou(d: f64, radius: f64) -> f64 {
    let r = radius;
    if d >= 2.0 * r {
        return 0.0;
    }
    if d <= 0.0 {
        return 1.0;
    }
    let lens = 2.0 * r * r * (d / (2.0 * r)).acos() - 0.5 * d * (4.0 * r * r - d * d).sqrt();
    lens / (2.0 * std::f64::consts::PI * r * r - lens)
}

/// One 3x3 box pass; columns wrap when asked, rows average in-bounds cells.
fn box_smooth(plane: &[f64], h: usize, w: usize, wrap: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for dc in -1isize..=1 {
                    let cc = c as isize + dc;
                    let cc = if wrap {
                        cc.rem_euclid(w as isize)
                    } else if (0..w as isize).contains(&cc) {
                        cc
                    } else {
                        continue;
                    };
                    s += plane[rr * w + cc as usize];
                    n += 1.0;
                }
            }
            out[r * w + c] = s / n;
        }
    }
    out
}

/// Local maxima of the smoothed radius as circles of diameter `beta`, pruned
/// greedily in descending order whenever IoU with a kept circle exceeds 0.5.
pub fn nms_baseline<T: Scalar>(grid: &RasterGrid<T>, beta: f64, wrap_azimuth: bool) -> Result<CountResult> {
    let ch = grid
        .channel_index("rho")
        .ok_or_else(|| Error::shape(format!("raster has no rho channel: {:?}", grid.channel_names())))?;
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("NMS diameter must be positive, got {beta}")));
    }
    let (h, w) = (grid.height(), grid.width());
    let plane: Vec<f64> = grid.plane(ch).iter().map(|v| v.as_f64()).collect();
    let s = box_smooth(&plane, h, w, wrap_azimuth);
    let mut proposals: Vec<(f64, usize, usize)> = Vec::new();
    let (c_lo, c_hi) = if wrap_azimuth { (0, w) } else { (1, w.saturating_sub(1)) };
    for r in 1..h.saturating_sub(1) {
        for c in c_lo..c_hi {
            let v = s[r * w + c];
            let margin = MAXIMUM_TOLERANCE * v.abs();
            let is_max = (-1isize..=1).all(|dr| {
                (-1isize..=1).all(|dc| {
                    if dr == 0 && dc == 0 {
                        return true;
                    }
                    let rr = (r as isize + dr) as usize;
                    let cc = (c as isize + dc).rem_euclid(w as isize) as usize;
                    v > s[rr * w + cc] + margin
                })
            });
            if is_max {
                proposals.push((v, r, c));
            }
        }
    }
    proposals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let radius = beta / 2.0;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for &(_, r, c) in &proposals {
        let overlaps = kept.iter().any(|&(kr, kc)| {
            let dr = r as f64 - kr as f64;
            let mut dc = (c as f64 - kc as f64).abs();
            if wrap_azimuth {
                dc = dc.min(w as f64 - dc);
            }
            circle_iou((dr * dr + dc * dc).sqrt(), radius) > 0.5
        });
        if !overlaps {
            kept.push((r, c));
        }
    }
    Ok(CountResult {
        count: kept.len() as f64,
        centers: kept.iter().map(|&(r, c)| [r as f64, c as f64]).collect(),
        method: "nms".into(),
        p_t: None,
    })
}
