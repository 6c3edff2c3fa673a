//! Meshes, pinhole intrinsics and camera trajectories.
//!
//! Camera frame: +x right, +y down, +z forward. A [`CameraPose`] maps world
//! points into that frame (`p_cam = R * p_world + t`). Pose files follow the
//! KITTI odometry layout and store the opposite direction (camera-to-world);
//! the conversion happens in [`load_trajectory`] / [`save_trajectory`].

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Mid-gray used when a mesh file carries no vertex colors.
pub const DEFAULT_GRAY: [f32; 3] = [0.5, 0.5, 0.5];

/// Largest deviation from orthonormality still repaired on load.
pub const ORTHONORMAL_REPAIR_TOL: f64 = 1e-3;

/// Indexed triangle mesh with per-vertex color.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    colors: Vec<[f32; 3]>,
    triangles: Vec<[u32; 3]>,
}

impl Mesh {
    /// Validates and builds a mesh. `colors` may be empty, in which case every
    /// vertex is mid-gray.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        colors: Vec<[f32; 3]>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self> {
        let colors = if colors.is_empty() {
            vec![DEFAULT_GRAY; vertices.len()]
        } else {
            colors
        };
        if colors.len() != vertices.len() {
            return Err(Error::Shape(format!(
                "{} colors for {} vertices",
                colors.len(),
                vertices.len()
            )));
        }
        if let Some(i) = vertices
            .iter()
            .position(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFiniteVertex(i));
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &idx in tri {
                if idx as usize >= vertices.len() {
                    return Err(Error::IndexOutOfRange {
                        triangle: t,
                        index: idx as usize,
                        count: vertices.len(),
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::RepeatedIndex(t));
            }
        }
        Ok(Self {
            vertices,
            colors,
            triangles,
        })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            colors: Vec::new(),
            triangles: Vec::new(),
        }
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle_positions(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

/// Pinhole intrinsics in pixels. Pixel `(col, row)` has its center at
/// image coordinates `(col, row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Unnormalized viewing ray through pixel center `(col, row)`; its z component is 1.
    pub fn pixel_ray(&self, col: f64, row: f64) -> Vector3<f64> {
        Vector3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0)
    }

    pub fn from_config(cfg: &mut KvConfig) -> Result<Self> {
        Self::new(
            cfg.take_required("fx")?,
            cfg.take_required("fy")?,
            cfg.take_required("cx")?,
            cfg.take_required("cy")?,
            cfg.take_required("width")?,
            cfg.take_required("height")?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = KvConfig::load(path)?;
        let intr = Self::from_config(&mut cfg)?;
        cfg.finish()?;
        Ok(intr)
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation within 1e-6.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let dev = orthonormal_deviation(&rotation);
        if dev > 1e-6 || rotation.determinant() <= 0.0 {
            return Err(Error::NotOrthonormal {
                frame: 0,
                deviation: dev,
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`, with `down` approximating image +y.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Max-abs entry of `R Rᵀ - I`.
pub fn orthonormal_deviation(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).abs().max()
}

/// Closest rotation in the Frobenius sense (polar factor via SVD).
pub fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vt");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<CameraPose>,
    frames: Vec<usize>,
}

impl Trajectory {
    pub fn new(poses: Vec<CameraPose>, frames: Vec<usize>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Empty("trajectory has no poses".into()));
        }
        if poses.len() != frames.len() {
            return Err(Error::Shape(format!(
                "{} poses but {} frame indices",
                poses.len(),
                frames.len()
            )));
        }
        if frames.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "frame indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { poses, frames })
    }

    /// Frames numbered 0, 1, 2, ...
    pub fn from_poses(poses: Vec<CameraPose>) -> Result<Self> {
        let frames = (0..poses.len()).collect();
        Self::new(poses, frames)
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &CameraPose)> {
        self.frames.iter().copied().zip(self.poses.iter())
    }
}

/// Parses KITTI-style pose text: one camera-to-world `[R | t]` per line,
/// 12 numbers in row-major order. Blank lines are skipped.
pub fn parse_trajectory(text: &str, origin: &str) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(origin, i + 1, format!("bad number: {e}")))?;
        if values.len() != 12 {
            return Err(Error::parse(
                origin,
                i + 1,
                format!("expected 12 numbers, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(origin, i + 1, "non-finite value"));
        }
        let rot = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let trans = Vector3::new(values[3], values[7], values[11]);
        let dev = orthonormal_deviation(&rot);
        if dev > ORTHONORMAL_REPAIR_TOL || rot.determinant() <= 0.0 {
            return Err(Error::NotOrthonormal {
                frame: poses.len(),
                deviation: dev,
            });
        }
        let cam_to_world = CameraPose {
            rotation: nearest_rotation(&rot),
            translation: trans,
        };
        poses.push(cam_to_world.inverse());
    }
    Trajectory::from_poses(poses)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, &path.display().to_string())
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for pose in traj.poses() {
        let c2w = pose.inverse();
        let r = &c2w.rotation;
        let t = &c2w.translation;
        let row = |i: usize| format!("{} {} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        let _ = writeln!(out, "{} {} {}", row(0), row(1), row(2));
    }
    out
}

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    std::fs::write(path, format_trajectory(traj)).map_err(|e| Error::io(path, e))
}

/// Parses the ASCII PLY subset documented in `docs/formats.md`.
pub fn parse_mesh(text: &str, origin: &str) -> Result<Mesh> {
    let mut lines = text.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::parse(origin, 0, format!("unexpected end of file, expected {what}")))
    };

    let (n, l) = next_line("`ply`")?;
    if l != "ply" {
        return Err(Error::parse(origin, n, "missing `ply` magic"));
    }

    #[derive(PartialEq)]
    enum Section {
        None,
        Vertex,
        Face,
    }
    let mut section = Section::None;
    let mut vertex_count = None;
    let mut face_count = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut saw_format = false;
    loop {
        let (n, l) = next_line("header line")?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", "1.0"] => saw_format = true,
            ["format", ..] => {
                return Err(Error::parse(origin, n, "only `format ascii 1.0` is supported"))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", count] => {
                if vertex_count.is_some() || face_count.is_some() {
                    return Err(Error::parse(origin, n, "vertex element must come first"));
                }
                vertex_count = Some(parse_count(count, origin, n)?);
                section = Section::Vertex;
            }
            ["element", "face", count] => {
                if vertex_count.is_none() {
                    return Err(Error::parse(origin, n, "face element before vertex element"));
                }
                face_count = Some(parse_count(count, origin, n)?);
                section = Section::Face;
            }
            ["element", other, ..] => {
                return Err(Error::parse(origin, n, format!("unsupported element `{other}`")))
            }
            ["property", "list", count_ty, index_ty, name] if section == Section::Face => {
                if !matches!(*count_ty, "uchar" | "uint8" | "int" | "uint") {
                    return Err(Error::parse(origin, n, "unsupported list count type"));
                }
                if !matches!(*index_ty, "int" | "uint" | "int32" | "uint32") {
                    return Err(Error::parse(origin, n, "unsupported list index type"));
                }
                if !matches!(*name, "vertex_indices" | "vertex_index") {
                    return Err(Error::parse(origin, n, "unsupported face property"));
                }
            }
            ["property", ty, name] if section == Section::Vertex => {
                let ok = match *name {
                    "x" | "y" | "z" => matches!(*ty, "float" | "double" | "float32" | "float64"),
                    "red" | "green" | "blue" => matches!(*ty, "uchar" | "uint8"),
                    _ => false,
                };
                if !ok {
                    return Err(Error::parse(
                        origin,
                        n,
                        format!("unsupported vertex property `{ty} {name}`"),
                    ));
                }
                vertex_props.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(Error::parse(origin, n, format!("unexpected header line `{l}`"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(origin, 0, "missing format line"));
    }
    let has_rgb = match vertex_props.as_slice() {
        [x, y, z] if x == "x" && y == "y" && z == "z" => false,
        [x, y, z, r, g, b]
            if x == "x" && y == "y" && z == "z" && r == "red" && g == "green" && b == "blue" =>
        {
            true
        }
        _ => {
            return Err(Error::parse(
                origin,
                0,
                "vertex properties must be `x y z` optionally followed by `red green blue`",
            ))
        }
    };

    let vertex_count = vertex_count.unwrap_or(0);
    let face_count = face_count.unwrap_or(0);
    let mut vertices = Vec::with_capacity(vertex_count);
    let mut colors = Vec::with_capacity(if has_rgb { vertex_count } else { 0 });
    for _ in 0..vertex_count {
        let (n, l) = next_line("vertex")?;
        let words: Vec<&str> = l.split_whitespace().collect();
        let expected = if has_rgb { 6 } else { 3 };
        if words.len() != expected {
            return Err(Error::parse(
                origin,
                n,
                format!("expected {expected} vertex values, found {}", words.len()),
            ));
        }
        let mut p = [0.0f64; 3];
        for (k, w) in words[..3].iter().enumerate() {
            p[k] = w
                .parse()
                .map_err(|_| Error::parse(origin, n, format!("bad coordinate `{w}`")))?;
            if !p[k].is_finite() {
                return Err(Error::NonFiniteVertex(vertices.len()));
            }
        }
        vertices.push(Vector3::from(p));
        if has_rgb {
            let mut c = [0.0f32; 3];
            for (k, w) in words[3..].iter().enumerate() {
                let v: u8 = w
                    .parse()
                    .map_err(|_| Error::parse(origin, n, format!("bad color `{w}`")))?;
                c[k] = v as f32 / 255.0;
            }
            colors.push(c);
        }
    }
    let mut triangles = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        let (n, l) = next_line("face")?;
        let words: Vec<&str> = l.split_whitespace().collect();
        let bad = |w: &str| Error::parse(origin, n, format!("bad index `{w}`"));
        let count: usize = words
            .first()
            .ok_or_else(|| Error::parse(origin, n, "empty face line"))?
            .parse()
            .map_err(|_| bad(words[0]))?;
        if count != 3 {
            return Err(Error::parse(
                origin,
                n,
                format!("only triangles are supported, found a {count}-gon"),
            ));
        }
        if words.len() != 4 {
            return Err(Error::parse(origin, n, "face line must hold exactly 3 indices"));
        }
        let mut tri = [0u32; 3];
        for k in 0..3 {
            let idx: i64 = words[k + 1].parse().map_err(|_| bad(words[k + 1]))?;
            if idx < 0 || idx as usize >= vertices.len() {
                return Err(Error::IndexOutOfRange {
                    triangle: triangles.len(),
                    index: idx.max(0) as usize,
                    count: vertices.len(),
                });
            }
            tri[k] = idx as u32;
        }
        triangles.push(tri);
    }
    for (n, l) in lines {
        if !l.trim().is_empty() {
            return Err(Error::parse(origin, n + 1, "trailing data after last face"));
        }
    }
    Mesh::new(vertices, colors, triangles)
}

fn parse_count(s: &str, origin: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(origin, line, format!("bad element count `{s}`")))
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text, &path.display().to_string())
}

/// Writes the mesh with colors quantized to 8 bits per channel.
pub fn format_mesh(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(64 * mesh.vertices().len());
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", mesh.vertices().len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    let _ = writeln!(out, "element face {}", mesh.triangles().len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (v, c) in mesh.vertices().iter().zip(mesh.colors()) {
        let q = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        let _ = writeln!(out, "{} {} {} {} {} {}", v.x, v.y, v.z, q(c[0]), q(c[1]), q(c[2]));
    }
    for t in mesh.triangles() {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    out
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, format_mesh(mesh)).map_err(|e| Error::io(path, e))
}
