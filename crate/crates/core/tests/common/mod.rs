//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use meshcorr::autodiff::{ParamStore, Tape, Tensor, Var};
use meshcorr::raster::NEAR_PLANE;
use meshcorr::scene::{CameraIntrinsics, CameraPose, Mesh};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;

/// Ray parameter of the hit of `orig + t * dir` with a triangle, both faces.
pub fn moller_trumbore(orig: &Vector3<f64>, dir: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = orig - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Nearest hit per pixel: `(inverse depth, triangle index)`, by casting one
/// ray through every pixel centre in camera coordinates.
pub fn raycast(mesh: &Mesh, pose: &CameraPose, intr: &CameraIntrinsics) -> Vec<Option<(f64, usize)>> {
    let tris: Vec<[Vector3<f64>; 3]> = (0..mesh.triangles().len())
        .map(|t| mesh.triangle_positions(t).map(|p| pose.transform_point(&p)))
        .collect();
    let origin = Vector3::zeros();
    let mut out = Vec::with_capacity(intr.width * intr.height);
    for row in 0..intr.height {
        for col in 0..intr.width {
            // with a unit z component, the ray parameter is the depth
            let dir = Vector3::new(
                (col as f64 - intr.cx) / intr.fx,
                (row as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let mut best: Option<(f64, usize)> = None;
            for (i, tri) in tris.iter().enumerate() {
                if let Some(t) = moller_trumbore(&origin, &dir, tri) {
                    if t >= NEAR_PLANE && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            out.push(best.map(|(t, i)| (1.0 / t, i)));
        }
    }
    out
}

pub fn random_pose<R: Rng>(rng: &mut R) -> CameraPose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rot = Rotation3::new(axis * rng.random_range(0.0..3.0));
    let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    CameraPose::new(*rot.matrix(), t).unwrap()
}

/// Random triangles in front of a random camera (some straddling the near
/// plane), expressed in world coordinates.
pub fn random_scene<R: Rng>(rng: &mut R, intr: &CameraIntrinsics, max_tris: usize) -> (Mesh, CameraPose) {
    let pose = random_pose(rng);
    let to_world = pose.inverse();
    let n = rng.random_range(1..=max_tris);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for t in 0..n {
        let z: f64 = rng.random_range(0.3..8.0);
        let u = rng.random_range(-10.0..intr.width as f64 + 10.0);
        let v = rng.random_range(-10.0..intr.height as f64 + 10.0);
        let size = rng.random_range(0.1..1.5) * z.max(1.0);
        for _ in 0..3 {
            let zc = if rng.random_bool(0.05) { rng.random_range(-0.5..0.4) } else { z + rng.random_range(-0.5..0.5) * size };
            let center = Vector3::new((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, 0.0);
            let p = Vector3::new(
                center.x + rng.random_range(-1.0..1.0) * size,
                center.y + rng.random_range(-1.0..1.0) * size,
                zc,
            );
            vertices.push(to_world.transform_point(&p));
        }
        triangles.push([3 * t as u32, 3 * t as u32 + 1, 3 * t as u32 + 2]);
    }
    (Mesh::new(vertices, Vec::new(), triangles).unwrap(), pose)
}

pub fn naive_rmse(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let mut n = 0.0;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            n += 1.0;
        }
    }
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i] - gt[i];
            sum += d * d / n;
        }
    }
    sum.sqrt()
}

pub fn naive_delta(pred: &[f64], gt: &[f64], mask: &[bool]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let thr = 1.25f64.powi(k as i32 + 1);
        let mut hit = 0usize;
        let mut n = 0usize;
        for i in 0..pred.len() {
            if !mask[i] {
                continue;
            }
            n += 1;
            let r = if pred[i] / gt[i] > gt[i] / pred[i] { pred[i] / gt[i] } else { gt[i] / pred[i] };
            if r < thr {
                hit += 1;
            }
        }
        *o = hit as f64 / n as f64;
    }
    out
}

/// Largest relative error between analytic and central-difference gradients
/// of `f` at the listed entries of `x`. Differences below `abs_floor` count
/// as agreement.
pub fn fd_relative_error(
    x: &Tensor<f64>,
    entries: &[usize],
    analytic: &Tensor<f64>,
    h: f64,
    abs_floor: f64,
    f: &dyn Fn(&Tensor<f64>) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in entries {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs();
        if err > abs_floor {
            worst = worst.max(err / a.abs().max(numeric.abs()));
        }
    }
    worst
}

/// Gradient check of a unary tape op through a fixed random projection.
/// Returns the worst relative error over all input entries.
pub fn check_unary_op<R: Rng>(
    rng: &mut R,
    shape: [usize; 4],
    op: &dyn Fn(&mut Tape<f64>, Var) -> Var,
) -> f64 {
    let n: usize = shape.iter().product();
    let x = Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let store = ParamStore::new();
    let out_len = {
        let mut tape = Tape::new(&store);
        let v = tape.input(x.clone());
        let y = op(&mut tape, v);
        tape.value(y).len()
    };
    let w: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |x: &Tensor<f64>| {
        let mut tape = Tape::new(&store);
        let v = tape.input(x.clone());
        let y = op(&mut tape, v);
        let s = tape.weighted_sum(y, &w).unwrap();
        tape.value(s).data()[0]
    };
    let mut tape = Tape::new(&store);
    let v = tape.input(x.clone());
    let y = op(&mut tape, v);
    let s = tape.weighted_sum(y, &w).unwrap();
    let g = tape.backward(s);
    let entries: Vec<usize> = (0..n).collect();
    fd_relative_error(&x, &entries, g.input(v).unwrap(), 1e-6, 1e-6, &eval)
}
