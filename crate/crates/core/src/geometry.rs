//! Surface samples, centering, spherical coordinates, rotations and mesh I/O.
//!
//! Angles are in degrees throughout. `theta` is the inclination from +Z in
//! `[0, 180]`, `phi` the azimuth from +X in `[-180, 180]`. Rotations are
//! right-handed. Inputs are assumed to be pre-aligned with the Z axis; there is
//! no automatic principal-axis alignment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    /// Unit vector in the same direction, or `None` for a zero vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        (n > T::zero() && n.is_finite()).then(|| self.scale(T::one() / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Scalar>(self) -> Point3<U> {
        Point3::new(
            U::from_f64_lossy(self.x.as_f64()),
            U::from_f64_lossy(self.y.as_f64()),
            U::from_f64_lossy(self.z.as_f64()),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample<T> {
    pub position: Point3<T>,
    pub normal: Point3<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud<T> {
    pub samples: Vec<SurfaceSample<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(samples: Vec<SurfaceSample<T>>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Position centroid, accumulated in f64.
    pub fn centroid(&self) -> Result<Point3<T>> {
        if self.samples.is_empty() {
            return Err(Error::EmptyInput("point cloud"));
        }
        let mut acc = [0.0f64; 3];
        for s in &self.samples {
            acc[0] += s.position.x.as_f64();
            acc[1] += s.position.y.as_f64();
            acc[2] += s.position.z.as_f64();
        }
        let n = self.samples.len() as f64;
        Ok(Point3::new(lit(acc[0] / n), lit(acc[1] / n), lit(acc[2] / n)))
    }

    /// Applies a linear map to positions and normals alike.
    fn transform(&self, m: &[[T; 3]; 3]) -> Self {
        let apply = |p: Point3<T>| {
            Point3::new(
                m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
                m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
                m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z,
            )
        };
        Self::new(
            self.samples
                .iter()
                .map(|s| SurfaceSample {
                    position: apply(s.position),
                    normal: apply(s.normal),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint<T> {
    pub rho: T,
    pub theta: T,
    pub phi: T,
}

/// Translates positions so their centroid is the origin; normals are unchanged.
pub fn center_to_origin<T: Scalar>(cloud: &PointCloud<T>) -> Result<PointCloud<T>> {
    let c = cloud.centroid()?;
    Ok(PointCloud::new(
        cloud
            .samples
            .iter()
            .map(|s| SurfaceSample {
                position: s.position.sub(c),
                normal: s.normal,
            })
            .collect(),
    ))
}

pub fn cartesian_to_spherical<T: Scalar>(p: Point3<T>) -> SphericalPoint<T> {
    let planar = (p.x * p.x + p.y * p.y).sqrt();
    let rho = p.norm();
    if rho == T::zero() {
        return SphericalPoint::default();
    }
    let theta = planar.atan2(p.z).to_degrees();
    // poles carry no azimuth; this also catches a signed-zero x
    let phi = if planar == T::zero() {
        T::zero()
    } else {
        p.y.atan2(p.x).to_degrees()
    };
    SphericalPoint { rho, theta, phi }
}

pub fn spherical_to_cartesian<T: Scalar>(s: SphericalPoint<T>) -> Point3<T> {
    let (st, ct) = s.theta.to_radians().sin_cos();
    let (sp, cp) = s.phi.to_radians().sin_cos();
    Point3::new(s.rho * st * cp, s.rho * st * sp, s.rho * ct)
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90.
fn sin_cos_deg<T: Scalar>(angle: T) -> (T, T) {
    let a = angle.as_f64().rem_euclid(360.0);
    let (s, c) = match a {
        a if a == 0.0 => (0.0, 1.0),
        a if a == 90.0 => (1.0, 0.0),
        a if a == 180.0 => (0.0, -1.0),
        a if a == 270.0 => (-1.0, 0.0),
        a => a.to_radians().sin_cos(),
    };
    (lit(s), lit(c))
}

/// Right-handed rotation about +X: `(0,0,1)` turns to `(0,-1,0)` at 90 degrees.
pub fn rotate_about_x<T: Scalar>(cloud: &PointCloud<T>, angle: T) -> PointCloud<T> {
    let (s, c) = sin_cos_deg(angle);
    let (o, l) = (T::zero(), T::one());
    cloud.transform(&[[l, o, o], [o, c, -s], [o, s, c]])
}

/// Right-handed rotation about +Z; increases azimuth by `angle`.
pub fn rotate_about_z<T: Scalar>(cloud: &PointCloud<T>, angle: T) -> PointCloud<T> {
    let (s, c) = sin_cos_deg(angle);
    let (o, l) = (T::zero(), T::one());
    cloud.transform(&[[c, -s, o], [s, c, o], [o, o, l]])
}

/// Vertex normals plus the number of zero-area faces that were skipped.
#[derive(Clone, Debug)]
pub struct NormalEstimate<T> {
    pub cloud: PointCloud<T>,
    pub skipped_faces: usize,
}

/// Area-weighted vertex normals. Polygons are fan-triangulated. If most
/// normals point towards the centroid, all of them are flipped.
pub fn estimate_normals_from_mesh<T: Scalar>(
    vertices: &[Point3<T>],
    faces: &[Vec<usize>],
) -> Result<NormalEstimate<T>> {
    if vertices.is_empty() {
        return Err(Error::EmptyInput("mesh vertices"));
    }
    let mut acc = vec![[0.0f64; 3]; vertices.len()];
    let mut skipped = 0;
    for (fi, face) in faces.iter().enumerate() {
        if let Some(&bad) = face.iter().find(|&&i| i >= vertices.len()) {
            return Err(Error::Format {
                what: "mesh",
                msg: format!("face {fi} references vertex {bad} of {}", vertices.len()),
            });
        }
        if face.len() < 3 {
            skipped += 1;
            continue;
        }
        let mut total = [0.0f64; 3];
        let p0 = vertices[face[0]].cast::<f64>();
        for w in face[1..].windows(2) {
            let e1 = vertices[w[0]].cast::<f64>().sub(p0);
            let e2 = vertices[w[1]].cast::<f64>().sub(p0);
            // |cross| is twice the triangle area, so this is area weighting
            let n = e1.cross(e2);
            total[0] += n.x;
            total[1] += n.y;
            total[2] += n.z;
        }
        let len = (total[0] * total[0] + total[1] * total[1] + total[2] * total[2]).sqrt();
        if !(len > 1e-300) {
            skipped += 1;
            continue;
        }
        for &vi in face {
            for k in 0..3 {
                acc[vi][k] += total[k];
            }
        }
    }
    let normals: Vec<Point3<f64>> = acc
        .iter()
        .map(|a| Point3::new(a[0], a[1], a[2]).normalized().unwrap_or_else(Point3::zero))
        .collect();
    let centroid = {
        let n = vertices.len() as f64;
        let s = vertices
            .iter()
            .fold(Point3::<f64>::zero(), |s, v| s.add(v.cast()));
        s.scale(1.0 / n)
    };
    let inward = vertices
        .iter()
        .zip(&normals)
        .filter(|(v, n)| n.dot(v.cast::<f64>().sub(centroid)) < 0.0)
        .count();
    let sign = if 2 * inward > vertices.len() { -1.0 } else { 1.0 };
    let samples = vertices
        .iter()
        .zip(&normals)
        .map(|(&position, n)| SurfaceSample {
            position,
            normal: n.scale(sign).cast(),
        })
        .collect();
    Ok(NormalEstimate {
        cloud: PointCloud::new(samples),
        skipped_faces: skipped,
    })
}

/// Vertices, optional per-vertex normals and polygon faces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh<T> {
    pub vertices: Vec<Point3<T>>,
    pub normals: Option<Vec<Point3<T>>>,
    pub faces: Vec<Vec<usize>>,
}

impl<T: Scalar> Mesh<T> {
    /// Uses stored normals when present, otherwise estimates them from faces.
    pub fn into_point_cloud(self) -> Result<PointCloud<T>> {
        if self.vertices.is_empty() {
            return Err(Error::EmptyInput("mesh vertices"));
        }
        match self.normals {
            Some(normals) => {
                let samples = self
                    .vertices
                    .into_iter()
                    .zip(normals)
                    .enumerate()
                    .map(|(i, (position, n))| {
                        let normal = n.normalized().ok_or_else(|| Error::Format {
                            what: "mesh",
                            msg: format!("vertex {i} has a zero normal"),
                        })?;
                        Ok(SurfaceSample { position, normal })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PointCloud::new(samples))
            }
            None if !self.faces.is_empty() => {
                Ok(estimate_normals_from_mesh(&self.vertices, &self.faces)?.cloud)
            }
            None => Err(Error::Format {
                what: "mesh",
                msg: "no normals and no faces to estimate them from".into(),
            }),
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: Scalar>(tok: &str, path: &Path, line: usize) -> Result<T> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(lit)
        .ok_or_else(|| parse_err(path, line, format!("expected a finite number, found `{tok}`")))
}

struct PlyElement {
    name: String,
    count: usize,
    /// `(name, is_list)` per property, in declaration order.
    props: Vec<(String, bool)>,
}

/// Parses an ASCII PLY document. `path` is only used in error messages.
pub fn parse_ply<T: Scalar>(text: &str, path: &Path) -> Result<Mesh<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(parse_err(path, ln, format!("unsupported PLY format `{fmt}` (only ascii)")));
                }
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, ln, format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or_else(|| parse_err(path, ln, "property before element"))?
                .props
                .push((name.to_string(), true)),
            ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| parse_err(path, ln, "property before element"))?
                .props
                .push((name.to_string(), false)),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, ln, format!("unrecognised header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, text.lines().count(), "missing end_header"));
    }

    let mut mesh = Mesh::default();
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut last_line = 0;
    for el in &elements {
        let col = |n: &str| el.props.iter().position(|(p, _)| p == n);
        let xyz = [col("x"), col("y"), col("z")];
        let nxyz = [col("nx"), col("ny"), col("nz")];
        let has_normals = nxyz.iter().all(Option::is_some);
        if el.name == "vertex" && has_normals {
            mesh.normals = Some(Vec::with_capacity(el.count));
        }
        for _ in 0..el.count {
            let (ln, line) = body
                .next()
                .ok_or_else(|| parse_err(path, last_line + 1, format!("unexpected end of file in element `{}`", el.name)))?;
            last_line = ln;
            let toks: Vec<&str> = line.split_whitespace().collect();
            // expand list properties to find where each property starts
            let mut starts = Vec::with_capacity(el.props.len());
            let mut pos = 0;
            for (_, is_list) in &el.props {
                starts.push(pos);
                if *is_list {
                    let n: usize = toks
                        .get(pos)
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err(path, ln, "bad list length"))?;
                    pos += 1 + n;
                } else {
                    pos += 1;
                }
            }
            if toks.len() < pos {
                return Err(parse_err(path, ln, format!("expected {pos} values, found {}", toks.len())));
            }
            match el.name.as_str() {
                "vertex" => {
                    let get = |c: Option<usize>, what: &str| -> Result<T> {
                        let c = c.ok_or_else(|| parse_err(path, ln, format!("vertex has no `{what}` property")))?;
                        parse_num(toks[starts[c]], path, ln)
                    };
                    mesh.vertices
                        .push(Point3::new(get(xyz[0], "x")?, get(xyz[1], "y")?, get(xyz[2], "z")?));
                    if let Some(normals) = mesh.normals.as_mut() {
                        normals.push(Point3::new(
                            get(nxyz[0], "nx")?,
                            get(nxyz[1], "ny")?,
                            get(nxyz[2], "nz")?,
                        ));
                    }
                }
                "face" => {
                    let c = col("vertex_indices")
                        .or_else(|| col("vertex_index"))
                        .ok_or_else(|| parse_err(path, ln, "face has no vertex_indices property"))?;
                    let s = starts[c];
                    let n: usize = toks[s].parse().map_err(|_| parse_err(path, ln, "bad face length"))?;
                    let face = toks[s + 1..s + 1 + n]
                        .iter()
                        .map(|t| t.parse::<usize>().map_err(|_| parse_err(path, ln, format!("bad vertex index `{t}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    mesh.faces.push(face);
                }
                _ => {}
            }
        }
    }
    check_faces(&mesh, path)?;
    Ok(mesh)
}

fn check_faces<T>(mesh: &Mesh<T>, path: &Path) -> Result<()> {
    for (i, f) in mesh.faces.iter().enumerate() {
        if let Some(&bad) = f.iter().find(|&&v| v >= mesh.vertices.len()) {
            return Err(Error::Format {
                what: "mesh",
                msg: format!("{}: face {i} references vertex {bad} of {}", path.display(), mesh.vertices.len()),
            });
        }
    }
    Ok(())
}

/// Parses a Wavefront OBJ document (`v`, `vn`, `f` records; others ignored).
pub fn parse_obj<T: Scalar>(text: &str, path: &Path) -> Result<Mesh<T>> {
    let mut vertices = Vec::new();
    let mut vns: Vec<Point3<T>> = Vec::new();
    let mut faces = Vec::new();
    let mut vn_refs: Vec<Option<usize>> = Vec::new();
    let resolve = |tok: &str, len: usize, ln: usize| -> Result<usize> {
        let i: i64 = tok.parse().map_err(|_| parse_err(path, ln, format!("bad index `{tok}`")))?;
        let idx = if i > 0 { i - 1 } else { len as i64 + i };
        if i == 0 || idx < 0 || idx as usize >= len {
            return Err(parse_err(path, ln, format!("index {i} out of range (have {len})")));
        }
        Ok(idx as usize)
    };
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") | Some("vn") => {
                let vals: Vec<T> = toks.take(3).map(|t| parse_num(t, path, ln)).collect::<Result<_>>()?;
                if vals.len() < 3 {
                    return Err(parse_err(path, ln, "expected 3 coordinates"));
                }
                let p = Point3::new(vals[0], vals[1], vals[2]);
                if line.starts_with("vn") {
                    vns.push(p);
                } else {
                    vertices.push(p);
                    vn_refs.push(None);
                }
            }
            Some("f") => {
                let mut face = Vec::new();
                for t in toks {
                    let mut parts = t.split('/');
                    let v = resolve(parts.next().unwrap_or(""), vertices.len(), ln)?;
                    if let Some(n) = parts.nth(1).filter(|s| !s.is_empty()) {
                        vn_refs[v] = Some(resolve(n, vns.len(), ln)?);
                    }
                    face.push(v);
                }
                if face.len() < 3 {
                    return Err(parse_err(path, ln, "face needs at least 3 vertices"));
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    let normals = if !vns.is_empty() && vn_refs.iter().all(Option::is_some) {
        Some(vn_refs.iter().map(|r| vns[r.expect("checked")]).collect())
    } else if !vns.is_empty() && vns.len() == vertices.len() && faces.is_empty() {
        Some(vns)
    } else {
        None
    };
    Ok(Mesh {
        vertices,
        normals,
        faces,
    })
}

/// Reads a `.ply` or `.obj` file, chosen by extension.
pub fn read_mesh<T: Scalar>(path: &Path) -> Result<Mesh<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => parse_ply(&text, path),
        Some("obj") => parse_obj(&text, path),
        _ => Err(Error::InvalidConfig(format!(
            "{}: unknown mesh extension (expected .ply or .obj)",
            path.display()
        ))),
    }
}

/// Reads a mesh file and returns its oriented point cloud.
pub fn read_point_cloud<T: Scalar>(path: &Path) -> Result<PointCloud<T>> {
    read_mesh(path)?.into_point_cloud()
}

/// ASCII PLY with positions and normals.
pub fn encode_ply<T: Scalar>(cloud: &PointCloud<T>) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\nend_header\n",
        cloud.len()
    );
    for s in &cloud.samples {
        let (p, n) = (s.position, s.normal);
        let _ = writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z);
    }
    out
}

pub fn write_ply<T: Scalar>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    std::fs::write(path, encode_ply(cloud)).map_err(|e| Error::io(path, e))
}
