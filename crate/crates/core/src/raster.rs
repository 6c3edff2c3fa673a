//! Software rasterization of a mesh into aligned feature channels.
//!
//! The pipeline mirrors a vertex / geometry / fragment shader split:
//! [`transform_vertices`] moves the mesh into the camera frame,
//! [`triangle_attributes`] derives the per-triangle features, and
//! [`rasterize`] scan-converts each triangle with a z-buffer.
//!
//! Sampling happens at pixel centers with a top-left fill rule, so pixels on
//! an edge shared by two triangles are written exactly once. Depth ties keep
//! the lower triangle index. Geometry is clipped against the near plane
//! before projection.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::scene::{CameraIntrinsics, CameraPose, Mesh};

pub const NEAR_PLANE: f64 = 0.1;

/// Triangles with a smaller area (m²) are skipped.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// The six feature kinds, in canonical channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    Rgb,
    InverseDepth,
    Area,
    Normal,
    EdgeRatio,
    ViewAngle,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 6] = [
        FeatureKind::Rgb,
        FeatureKind::InverseDepth,
        FeatureKind::Area,
        FeatureKind::Normal,
        FeatureKind::EdgeRatio,
        FeatureKind::ViewAngle,
    ];

    pub fn components(self) -> usize {
        match self {
            FeatureKind::Rgb | FeatureKind::Normal => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Rgb => "rgb",
            FeatureKind::InverseDepth => "inverse_depth",
            FeatureKind::Area => "area",
            FeatureKind::Normal => "normal",
            FeatureKind::EdgeRatio => "edge_ratio",
            FeatureKind::ViewAngle => "view_angle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Aligned feature rasters for one view. Uncovered pixels hold 0 in every
/// channel; consult `mask` rather than the sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImageSet {
    pub rgb: Image<f32>,
    pub inverse_depth: Image<f32>,
    pub area: Image<f32>,
    pub normal: Image<f32>,
    pub edge_ratio: Image<f32>,
    pub view_angle: Image<f32>,
    pub mask: Mask,
}

impl FeatureImageSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            rgb: Image::filled(width, height, 3, 0.0),
            inverse_depth: Image::filled(width, height, 1, 0.0),
            area: Image::filled(width, height, 1, 0.0),
            normal: Image::filled(width, height, 3, 0.0),
            edge_ratio: Image::filled(width, height, 1, 0.0),
            view_angle: Image::filled(width, height, 1, 0.0),
            mask: Image::filled(width, height, 1, false),
        }
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn channel(&self, kind: FeatureKind) -> &Image<f32> {
        match kind {
            FeatureKind::Rgb => &self.rgb,
            FeatureKind::InverseDepth => &self.inverse_depth,
            FeatureKind::Area => &self.area,
            FeatureKind::Normal => &self.normal,
            FeatureKind::EdgeRatio => &self.edge_ratio,
            FeatureKind::ViewAngle => &self.view_angle,
        }
    }

    pub fn channel_mut(&mut self, kind: FeatureKind) -> &mut Image<f32> {
        match kind {
            FeatureKind::Rgb => &mut self.rgb,
            FeatureKind::InverseDepth => &mut self.inverse_depth,
            FeatureKind::Area => &mut self.area,
            FeatureKind::Normal => &mut self.normal,
            FeatureKind::EdgeRatio => &mut self.edge_ratio,
            FeatureKind::ViewAngle => &mut self.view_angle,
        }
    }

    /// Assembles a set from individual channels, checking shapes.
    pub fn from_channels(
        channels: Vec<(FeatureKind, Image<f32>)>,
        mask: Mask,
    ) -> Result<Self> {
        let mut set = Self::empty(mask.width(), mask.height());
        for (kind, img) in channels {
            if !img.same_size(&mask) || img.channels() != kind.components() {
                return Err(Error::Shape(format!(
                    "channel `{}` is {}x{}x{}, expected {}x{}x{}",
                    kind.name(),
                    img.width(),
                    img.height(),
                    img.channels(),
                    mask.width(),
                    mask.height(),
                    kind.components()
                )));
            }
            *set.channel_mut(kind) = img;
        }
        set.mask = mask;
        Ok(set)
    }

    pub fn crop(&self, col0: usize, row0: usize, width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            rgb: self.rgb.crop(col0, row0, width, height)?,
            inverse_depth: self.inverse_depth.crop(col0, row0, width, height)?,
            area: self.area.crop(col0, row0, width, height)?,
            normal: self.normal.crop(col0, row0, width, height)?,
            edge_ratio: self.edge_ratio.crop(col0, row0, width, height)?,
            view_angle: self.view_angle.crop(col0, row0, width, height)?,
            mask: self.mask.crop(col0, row0, width, height)?,
        })
    }
}

/// Applies the world-to-camera transform; the z component is the depth.
pub fn transform_vertices(mesh: &Mesh, pose: &CameraPose) -> Vec<Vector3<f64>> {
    mesh.vertices()
        .iter()
        .map(|v| pose.transform_point(v))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleAttributes {
    pub area: f64,
    /// Unit normal oriented toward the camera center.
    pub normal: Vector3<f64>,
    /// Shortest over longest edge length, in (0, 1].
    pub edge_ratio: f64,
}

/// Per-triangle features of a camera-frame triangle, or `None` when its
/// area falls below [`DEGENERATE_AREA`].
pub fn triangle_attributes(tri: &[Vector3<f64>; 3]) -> Option<TriangleAttributes> {
    let [a, b, c] = tri;
    let cross = (b - a).cross(&(c - a));
    let norm = cross.norm();
    let area = 0.5 * norm;
    if !(area >= DEGENERATE_AREA) {
        return None;
    }
    let mut normal = cross / norm;
    let centroid = (a + b + c) / 3.0;
    if normal.dot(&(-centroid)) < 0.0 {
        normal = -normal;
    }
    let e = [(b - a).norm(), (c - b).norm(), (a - c).norm()];
    let longest = e[0].max(e[1]).max(e[2]);
    let shortest = e[0].min(e[1]).min(e[2]);
    Some(TriangleAttributes {
        area,
        normal,
        edge_ratio: shortest / longest,
    })
}

#[derive(Clone, Copy)]
struct ClipVertex {
    pos: Vector3<f64>,
    color: [f64; 3],
}

fn lerp_vertex(p: &ClipVertex, q: &ClipVertex, t: f64) -> ClipVertex {
    let mut color = [0.0; 3];
    for k in 0..3 {
        color[k] = p.color[k] + t * (q.color[k] - p.color[k]);
    }
    ClipVertex {
        pos: p.pos + (q.pos - p.pos) * t,
        color,
    }
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    (a.x, a.y, a.z) < (b.x, b.y, b.z)
}

/// Intersection of segment `pq` with the near plane, computed from a
/// canonical endpoint order so that neighbouring triangles agree bit-for-bit.
fn near_intersection(p: &ClipVertex, q: &ClipVertex) -> ClipVertex {
    let (p, q) = if lex_less(&p.pos, &q.pos) { (p, q) } else { (q, p) };
    let t = (NEAR_PLANE - p.pos.z) / (q.pos.z - p.pos.z);
    let mut v = lerp_vertex(p, q, t);
    v.pos.z = NEAR_PLANE;
    v
}

/// Sutherland–Hodgman against `z >= NEAR_PLANE`; returns 0, 3 or 4 vertices.
fn clip_near(tri: [ClipVertex; 3]) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let cur = &tri[i];
        let next = &tri[(i + 1) % 3];
        let cur_in = cur.pos.z >= NEAR_PLANE;
        let next_in = next.pos.z >= NEAR_PLANE;
        if cur_in {
            out.push(*cur);
        }
        if cur_in != next_in {
            out.push(near_intersection(cur, next));
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    inv_z: f64,
    color: [f64; 3],
}

/// Edge function with canonical endpoint order: `edge(a,b,p) == -edge(b,a,p)` exactly.
#[inline]
fn edge(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    if (a.x, a.y) <= (b.x, b.y) {
        (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
    } else {
        -((a.x - b.x) * (py - b.y) - (a.y - b.y) * (px - b.x))
    }
}

/// Top-left rule for an edge oriented so the interior has positive edge value
/// (image y grows downward).
#[inline]
fn is_top_left(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

struct Target<'a> {
    intr: &'a CameraIntrinsics,
    out: &'a mut FeatureImageSet,
}

impl Target<'_> {
    fn fill(&mut self, tri: [ScreenVertex; 3], attrs: &TriangleAttributes) {
        let [v0, mut v1, mut v2] = tri;
        let mut area2 = edge(&v0, &v1, v2.x, v2.y);
        if area2 == 0.0 || !area2.is_finite() {
            return;
        }
        if area2 < 0.0 {
            std::mem::swap(&mut v1, &mut v2);
            area2 = -area2;
        }
        let w = self.intr.width;
        let h = self.intr.height;
        let min_x = v0.x.min(v1.x).min(v2.x).ceil().max(0.0);
        let max_x = v0.x.max(v1.x).max(v2.x).floor().min(w as f64 - 1.0);
        let min_y = v0.y.min(v1.y).min(v2.y).ceil().max(0.0);
        let max_y = v0.y.max(v1.y).max(v2.y).floor().min(h as f64 - 1.0);
        if min_x > max_x || min_y > max_y {
            return;
        }
        let tl0 = is_top_left(&v1, &v2);
        let tl1 = is_top_left(&v2, &v0);
        let tl2 = is_top_left(&v0, &v1);
        let normal = attrs.normal;
        for row in min_y as usize..=max_y as usize {
            let py = row as f64;
            for col in min_x as usize..=max_x as usize {
                let px = col as f64;
                let w0 = edge(&v1, &v2, px, py);
                let w1 = edge(&v2, &v0, px, py);
                let w2 = edge(&v0, &v1, px, py);
                let inside = (w0 > 0.0 || (w0 == 0.0 && tl0))
                    && (w1 > 0.0 || (w1 == 0.0 && tl1))
                    && (w2 > 0.0 || (w2 == 0.0 && tl2));
                if !inside {
                    continue;
                }
                let (l0, l1, l2) = (w0 / area2, w1 / area2, w2 / area2);
                let inv_z = l0 * v0.inv_z + l1 * v1.inv_z + l2 * v2.inv_z;
                let out = &mut *self.out;
                if out.mask.get(col, row) && inv_z <= out.inverse_depth.get(col, row) as f64 {
                    continue;
                }
                let mut rgb = [0.0f32; 3];
                for k in 0..3 {
                    let num = l0 * v0.color[k] * v0.inv_z
                        + l1 * v1.color[k] * v1.inv_z
                        + l2 * v2.color[k] * v2.inv_z;
                    rgb[k] = (num / inv_z).clamp(0.0, 1.0) as f32;
                }
                let ray = self.intr.pixel_ray(px, py).normalize();
                let view = normal.dot(&ray).abs().min(1.0);
                out.mask.set(col, row, true);
                out.inverse_depth.set(col, row, inv_z as f32);
                out.rgb.pixel_mut(col, row).copy_from_slice(&rgb);
                out.area.set(col, row, attrs.area as f32);
                out.normal.pixel_mut(col, row).copy_from_slice(&[
                    normal.x as f32,
                    normal.y as f32,
                    normal.z as f32,
                ]);
                out.edge_ratio.set(col, row, attrs.edge_ratio as f32);
                out.view_angle.set(col, row, view as f32);
            }
        }
    }
}

/// Renders `mesh` as seen from `pose` into a [`FeatureImageSet`].
pub fn rasterize(mesh: &Mesh, pose: &CameraPose, intr: &CameraIntrinsics) -> FeatureImageSet {
    let mut out = FeatureImageSet::empty(intr.width, intr.height);
    let cam = transform_vertices(mesh, pose);
    let mut target = Target {
        intr,
        out: &mut out,
    };
    for &[a, b, c] in mesh.triangles() {
        let tri = [cam[a as usize], cam[b as usize], cam[c as usize]];
        if tri.iter().all(|p| p.z < NEAR_PLANE) {
            continue;
        }
        let Some(attrs) = triangle_attributes(&tri) else {
            continue;
        };
        let colors = mesh.colors();
        let cv = |i: u32, p: Vector3<f64>| {
            let c = colors[i as usize];
            ClipVertex {
                pos: p,
                color: [c[0] as f64, c[1] as f64, c[2] as f64],
            }
        };
        let poly = clip_near([cv(a, tri[0]), cv(b, tri[1]), cv(c, tri[2])]);
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<ScreenVertex> = poly
            .iter()
            .map(|v| {
                let inv_z = 1.0 / v.pos.z;
                ScreenVertex {
                    x: intr.fx * v.pos.x * inv_z + intr.cx,
                    y: intr.fy * v.pos.y * inv_z + intr.cy,
                    inv_z,
                    color: v.color,
                }
            })
            .collect();
        for k in 1..screen.len() - 1 {
            target.fill([screen[0], screen[k], screen[k + 1]], &attrs);
        }
    }
    out
}
