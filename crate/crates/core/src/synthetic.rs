//! Paired reference and corrupted street scenes for desk-scale experiments.
//!
//! A scene is a jittered ground grid, box obstacles along both sides, and
//! building facades. The camera copy of the scene receives corruptions that
//! mimic typical stereo-reconstruction failures: surfaces displaced in depth,
//! spurious surfaces bridging neighbouring objects, and missing patches.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::raster::rasterize;
use crate::scene::{CameraIntrinsics, CameraPose, Mesh, Trajectory};
use crate::train::Sample;

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Region {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn intersects(&self, other: &Region) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    /// Displace vertices inside the region by `magnitude` along `direction`.
    DepthBias,
    /// Bridge the first two obstacles inside the region with a curtain of
    /// triangles bulging `magnitude` toward the camera.
    Smear,
    /// Delete triangles whose centroid lies inside the region.
    Hole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub magnitude: f64,
    pub region: Region,
    /// Unit displacement direction for [`CorruptionKind::DepthBias`]; the
    /// default `-z` moves surfaces toward a camera travelling along `+z`.
    pub direction: Vector3<f64>,
}

impl Corruption {
    pub fn depth_bias(magnitude: f64, region: Region) -> Self {
        Self {
            kind: CorruptionKind::DepthBias,
            magnitude,
            region,
            direction: -Vector3::z(),
        }
    }

    pub fn with_direction(mut self, direction: Vector3<f64>) -> Self {
        self.direction = direction.normalize();
        self
    }

    pub fn smear(magnitude: f64, region: Region) -> Self {
        Self {
            kind: CorruptionKind::Smear,
            magnitude,
            region,
            direction: -Vector3::z(),
        }
    }

    pub fn hole(region: Region) -> Self {
        Self {
            kind: CorruptionKind::Hole,
            magnitude: 0.0,
            region,
            direction: -Vector3::z(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Street length along `+z` (m).
    pub length: f64,
    /// Distance from the street centre to the facades (m).
    pub half_width: f64,
    /// Height of the camera above the ground (m). The ground is the plane
    /// `y = camera_height` since `+y` points down.
    pub camera_height: f64,
    /// Ground grid spacing (m); interior vertices are jittered.
    pub grid_step: f64,
    pub box_count: usize,
    pub box_size: (f64, f64),
    pub walls: bool,
    pub frames: usize,
    /// Camera advance per frame (m).
    pub frame_step: f64,
    /// Amplitude of the smooth up-and-down camera motion (m). A varying
    /// height decouples image row from depth on the ground.
    pub height_variation: f64,
    pub corruptions: Vec<Corruption>,
}

impl SceneSpec {
    /// Uncorrupted street layout.
    pub fn clean(seed: u64) -> Self {
        Self {
            seed,
            length: 60.0,
            half_width: 7.0,
            camera_height: 1.6,
            grid_step: 1.5,
            box_count: 10,
            box_size: (1.0, 2.5),
            walls: true,
            frames: 30,
            frame_step: 0.8,
            height_variation: 0.5,
            corruptions: Vec::new(),
        }
    }

    /// Region holding the ground surface.
    pub fn ground_region(&self) -> Region {
        let h = self.camera_height;
        Region::new(
            Vector3::new(-self.half_width - 1.0, h - 0.05, -1.0),
            Vector3::new(self.half_width + 1.0, h + 0.05, self.length + 1.0),
        )
    }

    /// Region holding the obstacles, above the ground and between the facades.
    pub fn obstacle_region(&self) -> Region {
        Region::new(
            Vector3::new(-self.half_width + 0.25, self.camera_height - 10.0, -1.0),
            Vector3::new(self.half_width - 0.25, self.camera_height + 0.05, self.length + 1.0),
        )
    }

    /// Depth-bias task: the ground is reconstructed 0.35 m too high and every
    /// obstacle 0.5 m too near.
    pub fn bias_task(seed: u64) -> Self {
        let mut spec = Self::clean(seed);
        spec.corruptions = vec![
            Corruption::depth_bias(0.35, spec.ground_region()).with_direction(-Vector3::y()),
            Corruption::depth_bias(0.5, spec.obstacle_region()),
        ];
        spec
    }

    /// The bias task plus a hole in the road and a smear between obstacles.
    pub fn street(seed: u64) -> Self {
        let mut spec = Self::bias_task(seed);
        let h = spec.camera_height;
        spec.corruptions.push(Corruption::hole(Region::new(
            Vector3::new(-2.0, h - 0.5, 12.0),
            Vector3::new(1.0, h + 0.5, 16.0),
        )));
        spec.corruptions.push(Corruption::smear(
            0.6,
            Region::new(Vector3::new(-spec.half_width, h - 10.0, 8.0), Vector3::new(spec.half_width, h, 40.0)),
        ));
        spec
    }

    /// Reads layout keys (`seed`, `length`, `half_width`, `camera_height`,
    /// `grid_step`, `box_count`, `box_size_min`, `box_size_max`, `walls`,
    /// `frames`, `frame_step`, `height_variation`) on top of `base`.
    pub fn override_from_kv(mut self, cfg: &mut KvConfig) -> Result<Self> {
        self.seed = cfg.take_or("seed", self.seed)?;
        self.length = cfg.take_or("length", self.length)?;
        self.half_width = cfg.take_or("half_width", self.half_width)?;
        self.camera_height = cfg.take_or("camera_height", self.camera_height)?;
        self.grid_step = cfg.take_or("grid_step", self.grid_step)?;
        self.box_count = cfg.take_or("box_count", self.box_count)?;
        self.box_size.0 = cfg.take_or("box_size_min", self.box_size.0)?;
        self.box_size.1 = cfg.take_or("box_size_max", self.box_size.1)?;
        self.walls = cfg.take_or("walls", self.walls)?;
        self.frames = cfg.take_or("frames", self.frames)?;
        self.frame_step = cfg.take_or("frame_step", self.frame_step)?;
        self.height_variation = cfg.take_or("height_variation", self.height_variation)?;
        Ok(self)
    }

    fn bounds(&self) -> Region {
        Region::new(
            Vector3::new(-self.half_width - 1.0, self.camera_height - 20.0, -1.0),
            Vector3::new(self.half_width + 1.0, self.camera_height + 1.0, self.length + 1.0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !(finite_pos(self.length)
            && finite_pos(self.half_width)
            && finite_pos(self.camera_height)
            && finite_pos(self.grid_step)
            && finite_pos(self.frame_step))
        {
            return Err(Error::Config("scene dimensions must be positive and finite".into()));
        }
        if !(self.height_variation >= 0.0 && self.height_variation < 0.8 * self.camera_height) {
            return Err(Error::Config("height_variation must lie in [0, 0.8 * camera_height)".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if !(finite_pos(self.box_size.0) && self.box_size.0 <= self.box_size.1 && self.box_size.1.is_finite()) {
            return Err(Error::Config("invalid obstacle size range".into()));
        }
        if self.box_count > 0 && self.box_size.1 >= self.half_width {
            return Err(Error::Config("obstacles do not fit between the facades".into()));
        }
        if self.frames as f64 * self.frame_step >= self.length {
            return Err(Error::Config("trajectory leaves the street".into()));
        }
        let bounds = self.bounds();
        for (i, c) in self.corruptions.iter().enumerate() {
            if !c.magnitude.is_finite() || c.direction.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("corruption {i} has a non-finite parameter")));
            }
            if (0..3).any(|k| c.region.min[k] > c.region.max[k]) || !c.region.intersects(&bounds) {
                return Err(Error::Config(format!("corruption {i} region lies outside the scene")));
            }
        }
        Ok(())
    }
}

/// Obstacle placed by the layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub color: [f32; 3],
}

impl Obstacle {
    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) / 2.0
    }
}

/// Reference geometry before corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub mesh: Mesh,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vector3<f64>>,
    colors: Vec<[f32; 3]>,
    triangles: Vec<[u32; 3]>,
}

impl MeshBuilder {
    fn vertex(&mut self, p: Vector3<f64>, color: [f32; 3]) -> u32 {
        self.vertices.push(p);
        self.colors.push(color);
        (self.vertices.len() - 1) as u32
    }

    fn quad(&mut self, a: u32, b: u32, c: u32, d: u32) {
        self.triangles.push([a, b, c]);
        self.triangles.push([a, c, d]);
    }

    /// Grid over a rectangle spanned by `u` and `v` from `origin`, with
    /// `nu`×`nv` cells.
    fn grid(
        &mut self,
        origin: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        (nu, nv): (usize, usize),
        mut vertex_at: impl FnMut(usize, usize, Vector3<f64>) -> (Vector3<f64>, [f32; 3]),
    ) {
        let base = self.vertices.len() as u32;
        for j in 0..=nv {
            for i in 0..=nu {
                let p = origin + u * (i as f64 / nu as f64) + v * (j as f64 / nv as f64);
                let (p, c) = vertex_at(i, j, p);
                self.vertex(p, c);
            }
        }
        let row = (nu + 1) as u32;
        for j in 0..nv as u32 {
            for i in 0..nu as u32 {
                let a = base + j * row + i;
                self.quad(a, a + 1, a + row + 1, a + row);
            }
        }
    }

    fn cuboid(&mut self, min: Vector3<f64>, max: Vector3<f64>, color: [f32; 3]) {
        let base = self.vertices.len() as u32;
        for k in 0..8 {
            let p = Vector3::new(
                if k & 1 == 0 { min.x } else { max.x },
                if k & 2 == 0 { min.y } else { max.y },
                if k & 4 == 0 { min.z } else { max.z },
            );
            self.vertex(p, color);
        }
        for [a, b, c, d] in [
            [0, 1, 3, 2], // front (z = min)
            [4, 6, 7, 5], // back
            [0, 2, 6, 4], // x = min
            [1, 5, 7, 3], // x = max
            [0, 4, 5, 1], // top (y = min)
            [2, 3, 7, 6], // bottom
        ] {
            self.quad(base + a, base + b, base + c, base + d);
        }
    }

    fn finish(self) -> Result<Mesh> {
        Mesh::new(self.vertices, self.colors, self.triangles)
    }
}

/// Colors are quantized to the 8-bit levels used by the mesh file format so
/// that generated meshes survive a save/load round trip unchanged.
fn quantize(c: [f64; 3]) -> [f32; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0)
}

pub fn layout(spec: &SceneSpec) -> Result<Layout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = MeshBuilder::default();
    let h = spec.camera_height;
    let w = spec.half_width;

    let nu = ((2.0 * w) / spec.grid_step).ceil() as usize;
    let nv = (spec.length / spec.grid_step).ceil() as usize;
    let (du, dv) = (2.0 * w / nu as f64, spec.length / nv as f64);
    let jitter = 0.35;
    b.grid(
        Vector3::new(-w, h, 0.0),
        Vector3::new(2.0 * w, 0.0, 0.0),
        Vector3::new(0.0, 0.0, spec.length),
        (nu, nv),
        |i, j, p| {
            let mut q = p;
            if i > 0 && i < nu {
                q.x += rng.random_range(-jitter..jitter) * du;
            }
            if j > 0 && j < nv {
                q.z += rng.random_range(-jitter..jitter) * dv;
            }
            let g = 0.3 + rng.random_range(0.0..0.08);
            (q, quantize([g, g, g + 0.02]))
        },
    );

    if spec.walls {
        let height = 6.0;
        let nz = (spec.length / 3.0).ceil() as usize;
        for side in [-1.0, 1.0] {
            let tint: [f64; 3] = [rng.random_range(0.4..0.8), rng.random_range(0.3..0.6), rng.random_range(0.2..0.5)];
            // wind the facades so that both face the street
            let (origin, u) = if side < 0.0 {
                (Vector3::new(-w, h, spec.length), Vector3::new(0.0, 0.0, -spec.length))
            } else {
                (Vector3::new(w, h, 0.0), Vector3::new(0.0, 0.0, spec.length))
            };
            b.grid(origin, u, Vector3::new(0.0, -height, 0.0), (nz, 2), |_, _, p| {
                let s = rng.random_range(0.85..1.0);
                (p, quantize(tint.map(|c| c * s)))
            });
        }
    }

    let mut obstacles = Vec::new();
    let (smin, smax) = spec.box_size;
    let mut attempts = 0;
    while obstacles.len() < spec.box_count && attempts < 100 * spec.box_count {
        attempts += 1;
        let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let sx = rng.random_range(smin..=smax);
        let sy = rng.random_range(smin..=smax).min(h + 1.0);
        let sz = rng.random_range(smin..=smax) * 1.5;
        let xc = side * rng.random_range(2.0..(w - 0.5 * sx - 0.3).max(2.0 + 1e-9));
        let z0 = rng.random_range(4.0..(spec.length - sz - 1.0).max(4.0 + 1e-9));
        let min = Vector3::new(xc - sx / 2.0, h - sy, z0);
        let max = Vector3::new(xc + sx / 2.0, h, z0 + sz);
        let overlaps = obstacles.iter().any(|o: &Obstacle| {
            min.x < o.max.x + 0.5 && o.min.x < max.x + 0.5 && min.z < o.max.z + 0.5 && o.min.z < max.z + 0.5
        });
        if overlaps {
            continue;
        }
        let color = quantize([rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]);
        b.cuboid(min, max, color);
        obstacles.push(Obstacle { min, max, color });
    }

    let mesh = b.finish()?;
    if mesh.triangles().is_empty() {
        return Err(Error::Config("scene spec produces no geometry".into()));
    }
    Ok(Layout { mesh, obstacles })
}

/// Applies `corruptions` in order to the layout mesh.
pub fn apply_corruptions(layout: &Layout, corruptions: &[Corruption]) -> Result<Mesh> {
    let mut vertices = layout.mesh.vertices().to_vec();
    let mut colors = layout.mesh.colors().to_vec();
    let mut triangles = layout.mesh.triangles().to_vec();
    for c in corruptions {
        match c.kind {
            CorruptionKind::DepthBias => {
                // regions select on reference positions so that successive
                // corruptions do not chase displaced vertices
                for (v, orig) in vertices.iter_mut().zip(layout.mesh.vertices()) {
                    if c.region.contains(orig) {
                        *v += c.direction * c.magnitude;
                    }
                }
            }
            CorruptionKind::Hole => {
                triangles.retain(|t| {
                    let centroid = (vertices[t[0] as usize] + vertices[t[1] as usize] + vertices[t[2] as usize]) / 3.0;
                    !c.region.contains(&centroid)
                });
            }
            CorruptionKind::Smear => {
                let mut inside: Vec<&Obstacle> =
                    layout.obstacles.iter().filter(|o| c.region.contains(&o.center())).collect();
                inside.sort_by(|a, b| a.min.z.total_cmp(&b.min.z));
                let [a, b] = match inside.as_slice() {
                    [a, b, ..] => [*a, *b],
                    _ => continue,
                };
                let steps = 8;
                let base = vertices.len() as u32;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let lerp = |x: f64, y: f64| x + (y - x) * t;
                    let bulge = c.magnitude * (std::f64::consts::PI * t).sin();
                    let x = lerp(a.center().x, b.center().x);
                    let z = lerp(a.min.z, b.min.z) - bulge;
                    let color = [0, 1, 2].map(|k| lerp(a.color[k] as f64, b.color[k] as f64));
                    vertices.push(Vector3::new(x, lerp(a.min.y, b.min.y), z));
                    vertices.push(Vector3::new(x, a.max.y, z));
                    colors.push(quantize(color));
                    colors.push(quantize(color));
                }
                for s in 0..steps as u32 {
                    let (t0, b0) = (base + 2 * s, base + 2 * s + 1);
                    triangles.push([t0, t0 + 2, b0 + 2]);
                    triangles.push([t0, b0 + 2, b0]);
                }
            }
        }
    }
    Mesh::new(vertices, colors, triangles)
}

/// Camera path along the street: forward motion with a gentle lateral
/// weave, height change, yaw and pitch so that views are not all translates
/// of each other.
pub fn trajectory(spec: &SceneSpec) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7261_6a65_6374);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let bob = rng.random_range(0.0..std::f64::consts::TAU);
    let poses = (0..spec.frames)
        .map(|i| {
            let s = i as f64;
            let eye = Vector3::new(
                0.6 * (0.3 * s + phase).sin(),
                spec.height_variation * (0.45 * s + bob).sin(),
                1.0 + s * spec.frame_step,
            );
            let yaw = 0.08 * (0.2 * s + 2.0 * phase).sin();
            let pitch = 0.04 * (0.35 * s + bob).cos();
            let dir = Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
            CameraPose::look_at(eye, eye + dir, Vector3::y())
        })
        .collect();
    Trajectory::from_poses(poses)
}

/// A generated scene pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub laser: Mesh,
    pub camera: Mesh,
    pub trajectory: Trajectory,
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    let base = layout(spec)?;
    let camera = apply_corruptions(&base, &spec.corruptions)?;
    Ok(SyntheticScene {
        laser: base.mesh,
        camera,
        trajectory: trajectory(spec)?,
    })
}

/// Intrinsics of the training renders: 104×72 pixels, about 78° horizontal
/// field of view.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(64.0, 64.0, 51.5, 35.5, 104, 72).expect("valid constants")
}

/// Renders every trajectory frame of both meshes into training samples.
pub fn render_samples(scene: &SyntheticScene, intr: &CameraIntrinsics) -> Result<Vec<Sample>> {
    scene
        .trajectory
        .iter()
        .map(|(frame, pose)| {
            let cam = rasterize(&scene.camera, pose, intr);
            let laser = rasterize(&scene.laser, pose, intr);
            Sample::from_renders(cam, &laser, frame)
        })
        .collect()
}
