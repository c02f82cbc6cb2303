//! Deterministic synthetic scenes for oracle-based verification: placed
//! boxes, surface-sampled radar points with noise and clutter, exact
//! pinhole depth renders, and the ideal depth/occupancy tensors the
//! learned nets are checked against.
//!
//! Randomness comes from a fixed, documented generator (splitmix64-seeded
//! xorshift64*, with labeled sub-streams) so a scene is reproducible from
//! its seed alone, in any implementation.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CalibrationSet, GridSpec};
use crate::head::{Box3D, GtBox};
use crate::io;
use crate::nets::DepthBinSpec;
use crate::pointcloud::{ChannelLayout, RadarPointCloud};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- rng

fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// xorshift64* stream seeded through splitmix64. `split` derives an
/// independent generator from (this seed, label), so per-entity streams do
/// not depend on how much the parent has been consumed.
#[derive(Debug, Clone)]
pub struct SplitRng {
    base: u64,
    state: u64,
}

impl SplitRng {
    pub fn new(seed: u64) -> SplitRng {
        let s = mix(seed);
        SplitRng {
            base: seed,
            state: if s == 0 { 0x9E3779B97F4A7C15 } else { s },
        }
    }

    pub fn split(&self, label: u64) -> SplitRng {
        SplitRng::new(mix(self.base ^ mix(label)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform01();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Zero-mean Gaussian with the tails cut at ±4σ (resampled, not
    /// clamped, so the density stays Gaussian-shaped).
    pub fn truncated_normal(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        loop {
            let v = self.normal() * sigma;
            if v.abs() <= 4.0 * sigma {
                return v;
            }
        }
    }
}

// ---------------------------------------------------------------- scene spec

/// One class to place: how many boxes and their base dimensions (meters),
/// jittered per object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub name: String,
    pub count: usize,
    pub size: [f64; 3],
}

/// Canonical base dimensions (l, w, h) for the classes the synthesizer
/// knows about.
pub fn class_size(name: &str) -> Option<[f64; 3]> {
    match name {
        "car" => Some([4.2, 1.8, 1.6]),
        "pedestrian" => Some([0.6, 0.6, 1.7]),
        "cyclist" => Some([1.8, 0.6, 1.6]),
        "truck" => Some([7.5, 2.5, 3.0]),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    /// Per-dimension size jitter: each dimension is scaled by a uniform
    /// factor in [1−jitter, 1+jitter].
    pub size_jitter: f64,
    /// Surface noise, applied along the sampled face's outward normal and
    /// truncated at ±4σ.
    pub noise_sigma: f64,
    /// Clutter points per square meter of BEV area.
    pub clutter_rate: f64,
    pub points_per_object: usize,
    /// Extra clearance between box extents and the range bounds.
    pub placement_margin: f64,
    pub calib: CalibrationSet,
    pub grid: GridSpec,
}

/// A generated scene: annotated boxes (frame 0), the radar cloud in the
/// VoD 7-channel layout, and the rendered depth map (H×W meters, 0 = sky).
#[derive(Debug, Clone)]
pub struct Scene {
    pub boxes: Vec<GtBox>,
    pub cloud: RadarPointCloud,
    pub depth: Tensor,
}

// ---------------------------------------------------------------- generation

const PLACEMENT_ATTEMPTS: usize = 100;

fn place_boxes(spec: &SceneSpec, rng: &mut SplitRng) -> Result<Vec<(String, Box3D)>> {
    let g = &spec.grid;
    let m = spec.placement_margin;
    let mut placed: Vec<(String, Box3D)> = Vec::new();
    for obj in &spec.objects {
        for n in 0..obj.count {
            let mut accepted = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let j = spec.size_jitter;
                let size = [
                    obj.size[0] * rng.uniform(1.0 - j, 1.0 + j),
                    obj.size[1] * rng.uniform(1.0 - j, 1.0 + j),
                    obj.size[2] * rng.uniform(1.0 - j, 1.0 + j),
                ];
                // widest horizontal reach of a rotated footprint
                let reach = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
                let lo_x = g.x_min + m + reach;
                let hi_x = g.x_max - m - reach;
                let lo_y = g.y_min + m + reach;
                let hi_y = g.y_max - m - reach;
                let lo_z = g.z_min + size[2] / 2.0;
                let hi_z = g.z_max - size[2] / 2.0;
                if lo_x >= hi_x || lo_y >= hi_y || lo_z >= hi_z {
                    return Err(Error::Data(format!(
                        "scene: a {} does not fit in the grid with margin {}",
                        obj.name, m
                    )));
                }
                let center = [
                    rng.uniform(lo_x, hi_x),
                    rng.uniform(lo_y, hi_y),
                    rng.uniform(lo_z, hi_z),
                ];
                let yaw = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
                let cand = Box3D::new(center, size, yaw)?;
                let overlaps = placed
                    .iter()
                    .any(|(_, b)| crate::eval::rotated_intersection_area(&cand, b) > 1e-9);
                if !overlaps {
                    placed.push((obj.name.clone(), cand));
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                return Err(Error::Data(format!(
                    "scene: could not place {} #{} without overlap after {} attempts",
                    obj.name, n, PLACEMENT_ATTEMPTS
                )));
            }
        }
    }
    Ok(placed)
}

struct Face {
    center: [f64; 3],
    normal: [f64; 3],
    // in-face axes and half extents
    a: [f64; 3],
    ha: f64,
    b: [f64; 3],
    hb: f64,
    area: f64,
}

fn side_faces(b: &Box3D) -> Vec<Face> {
    let (cy, sy) = (b.yaw().cos(), b.yaw().sin());
    let u = [cy, sy, 0.0]; // heading
    let v = [-sy, cy, 0.0]; // lateral
    let w = [0.0, 0.0, 1.0];
    let c = b.center();
    let s = b.size();
    let (hl, hw, hh) = (s[0] / 2.0, s[1] / 2.0, s[2] / 2.0);
    let mk = |n: [f64; 3], off: f64, a: [f64; 3], ha: f64, area: f64| Face {
        center: [c[0] + n[0] * off, c[1] + n[1] * off, c[2] + n[2] * off],
        normal: n,
        a,
        ha,
        b: w,
        hb: hh,
        area,
    };
    vec![
        mk(u, hl, v, hw, s[1] * s[2]),
        mk([-u[0], -u[1], 0.0], hl, v, hw, s[1] * s[2]),
        mk(v, hw, u, hl, s[0] * s[2]),
        mk([-v[0], -v[1], 0.0], hw, u, hl, s[0] * s[2]),
    ]
}

fn sample_surface_points(
    b: &Box3D,
    count: usize,
    noise_sigma: f64,
    rng: &mut SplitRng,
) -> Vec<[f64; 3]> {
    // faces whose outward normal points back at the sensor at the origin
    let faces = side_faces(b);
    let visible: Vec<&Face> = faces
        .iter()
        .filter(|f| {
            f.normal[0] * (0.0 - f.center[0]) + f.normal[1] * (0.0 - f.center[1]) > 0.0
        })
        .collect();
    let pool: Vec<&Face> = if visible.is_empty() {
        faces.iter().collect()
    } else {
        visible
    };
    let total_area: f64 = pool.iter().map(|f| f.area).sum();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.uniform(0.0, total_area);
        let mut face = pool[pool.len() - 1];
        for f in &pool {
            if pick < f.area {
                face = f;
                break;
            }
            pick -= f.area;
        }
        let da = rng.uniform(-face.ha, face.ha);
        let db = rng.uniform(-face.hb, face.hb);
        let dn = rng.truncated_normal(noise_sigma);
        out.push([
            face.center[0] + da * face.a[0] + db * face.b[0] + dn * face.normal[0],
            face.center[1] + da * face.a[1] + db * face.b[1] + dn * face.normal[1],
            face.center[2] + da * face.a[2] + db * face.b[2] + dn * face.normal[2],
        ]);
    }
    out
}

/// Nearest box surface along the ray from `origin` in direction `dir`, as
/// the ray parameter, or None if the ray misses (or starts inside).
fn ray_box_entry(origin: &[f64; 3], dir: &[f64; 3], b: &Box3D) -> Option<f64> {
    let (cy, sy) = (b.yaw().cos(), b.yaw().sin());
    let c = b.center();
    let rel = [origin[0] - c[0], origin[1] - c[1], origin[2] - c[2]];
    // rotate by -yaw into the box frame
    let o = [
        cy * rel[0] + sy * rel[1],
        -sy * rel[0] + cy * rel[1],
        rel[2],
    ];
    let d = [
        cy * dir[0] + sy * dir[1],
        -sy * dir[0] + cy * dir[1],
        dir[2],
    ];
    let s = b.size();
    let half = [s[0] / 2.0, s[1] / 2.0, s[2] / 2.0];
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut ta, mut tb) = ((-half[k] - o[k]) * inv, (half[k] - o[k]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t_min = t_min.max(ta);
        t_max = t_max.min(tb);
    }
    if t_min > t_max || t_min <= 0.0 {
        None
    } else {
        Some(t_min)
    }
}

/// Exact pinhole render of the boxes: per-pixel metric depth of the nearest
/// surface, 0 where no box is hit. Pixel centers are at integer (u, v).
pub fn render_depth(boxes: &[Box3D], calib: &CalibrationSet) -> Tensor {
    let cam = &calib.camera;
    let (h, w) = (cam.image_height, cam.image_width);
    let intr = cam.matrix();
    let a = intr.fixed_view::<3, 3>(0, 0).into_owned();
    let b_col = intr.fixed_view::<3, 1>(0, 3).into_owned();
    let a_inv = a.try_inverse().expect("validated intrinsics are invertible");
    let extr_inv = calib.radar_to_camera.inverse();
    // projective center and its radar-frame position
    let center_cam = -(a_inv * b_col);
    let origin = extr_inv.apply(&Point3::new(center_cam.x, center_cam.y, center_cam.z));
    let origin = [origin.x, origin.y, origin.z];
    let rot_inv = extr_inv.rotation();

    let mut depth = Tensor::zeros(&[h, w]);
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut line = vec![0.0f32; w];
            for (col, slot) in line.iter_mut().enumerate() {
                let dir_cam = a_inv * Vector3::new(col as f64, row as f64, 1.0);
                let dir_r = rot_inv * dir_cam;
                let dir = [dir_r.x, dir_r.y, dir_r.z];
                let mut best: Option<f64> = None;
                for b in boxes {
                    if let Some(t) = ray_box_entry(&origin, &dir, b) {
                        if best.map_or(true, |bt| t < bt) {
                            best = Some(t);
                        }
                    }
                }
                if let Some(t) = best {
                    // depth is the camera-frame z of the hit point
                    let d = center_cam.z + t * dir_cam.z + intr[(2, 3)];
                    if d > 0.0 {
                        *slot = d as f32;
                    }
                }
            }
            line
        })
        .collect();
    for (row, line) in rows.into_iter().enumerate() {
        depth.row_mut(&[row]).copy_from_slice(&line);
    }
    depth
}

/// Build a full scene from the spec. Stream labels: 1 = placement,
/// 2 = clutter, 1000+i = surface points of box i.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.noise_sigma < 0.0 || spec.clutter_rate < 0.0 {
        return Err(Error::Config("scene: noise and clutter must be ≥ 0".into()));
    }
    if !(0.0..1.0).contains(&spec.size_jitter) {
        return Err(Error::Config("scene: size jitter must be in [0, 1)".into()));
    }
    let root = SplitRng::new(spec.seed);
    let mut place_rng = root.split(1);
    let placed = place_boxes(spec, &mut place_rng)?;

    let layout = ChannelLayout::vod();
    let mut rows: Vec<f32> = Vec::new();
    let mut push_point = |p: [f64; 3], rcs: f32, vr: f32, vrc: f32| {
        rows.extend_from_slice(&[p[0] as f32, p[1] as f32, p[2] as f32, rcs, vr, vrc, 0.0]);
    };
    for (i, (_, b)) in placed.iter().enumerate() {
        let mut srng = root.split(1000 + i as u64);
        for p in sample_surface_points(b, spec.points_per_object, spec.noise_sigma, &mut srng) {
            let rcs = srng.uniform(5.0, 20.0) as f32;
            let vr = srng.uniform(-2.0, 2.0) as f32;
            let vrc = srng.uniform(-2.0, 2.0) as f32;
            push_point(p, rcs, vr, vrc);
        }
    }
    let g = &spec.grid;
    let bev_area = (g.x_max - g.x_min) * (g.y_max - g.y_min);
    let clutter = (spec.clutter_rate * bev_area).round() as usize;
    let mut crng = root.split(2);
    for _ in 0..clutter {
        let p = [
            crng.uniform(g.x_min, g.x_max),
            crng.uniform(g.y_min, g.y_max),
            crng.uniform(g.z_min, g.z_max),
        ];
        let rcs = crng.uniform(-20.0, 0.0) as f32;
        let vr = crng.uniform(-2.0, 2.0) as f32;
        let vrc = crng.uniform(-2.0, 2.0) as f32;
        push_point(p, rcs, vr, vrc);
    }
    let n = rows.len() / layout.channels();
    let matrix = Tensor::from_vec(&[n, layout.channels()], rows)?;
    let cloud = RadarPointCloud::from_channels(&matrix, layout)?;

    let boxes_only: Vec<Box3D> = placed.iter().map(|(_, b)| b.clone()).collect();
    let depth = render_depth(&boxes_only, &spec.calib);
    let boxes = placed
        .into_iter()
        .map(|(class, bbox)| GtBox {
            frame: 0,
            class,
            bbox,
            tags: Vec::new(),
        })
        .collect();
    Ok(Scene {
        boxes,
        cloud,
        depth,
    })
}

// ---------------------------------------------------------------- oracles

/// One-hot depth distribution per pixel: 1 at the bin containing the
/// rendered depth, all-zero rows for sky pixels and depths outside the bin
/// range.
pub fn ideal_depth_distribution(depth_map: &Tensor, bins: &DepthBinSpec) -> Tensor {
    let (h, w) = (depth_map.shape()[0], depth_map.shape()[1]);
    let mut out = Tensor::zeros(&[h, w, bins.bins]);
    for r in 0..h {
        for c in 0..w {
            let d = depth_map.at(&[r, c]) as f64;
            if d > 0.0 {
                if let Some(k) = bins.bin_of(d) {
                    *out.at_mut(&[r, c, k]) = 1.0;
                }
            }
        }
    }
    out
}

/// Binary occupancy: 1 iff the voxel center lies inside some box.
pub fn ideal_occupancy(boxes: &[Box3D], spec: &GridSpec) -> Tensor {
    let (nx, ny, nz) = (spec.nx(), spec.ny(), spec.nz());
    let mut out = Tensor::zeros(&[nx, ny, nz]);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let c = spec.voxel_center(i, j, k);
                if boxes.iter().any(|b| b.contains(c)) {
                    *out.at_mut(&[i, j, k]) = 1.0;
                }
            }
        }
    }
    out
}

/// Deterministic stand-in for backbone feature maps: uniform values in
/// [0, 1).
pub fn seeded_features(rng: &mut SplitRng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform01() as f32;
    }
    t
}

// ---------------------------------------------------------------- dumps

/// Standard forward-looking rig: camera at the radar origin, optical axis
/// along radar +x, principal point at the image center.
pub fn canonical_calibration(width: usize, height: usize, focal: f64) -> CalibrationSet {
    let r = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let extr = crate::geometry::extend_transform(&r, &Vector3::zeros())
        .expect("fixed rotation is orthonormal");
    let cam = crate::geometry::CameraIntrinsics::from_pinhole(
        focal,
        focal,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
    )
    .expect("positive focal length");
    CalibrationSet::new(cam, extr)
}

pub fn frame_dir_name(frame: u32) -> String {
    format!("frame_{:04}", frame)
}

/// Write one frame of a scene dump: points.bin, gt.csv, depth.lxt, and one
/// features_l<i>.lxt per provided level tensor.
pub fn write_frame_dir(
    root: &Path,
    frame: u32,
    scene: &Scene,
    levels: &[Tensor],
) -> Result<PathBuf> {
    let dir = root.join(frame_dir_name(frame));
    fs::create_dir_all(&dir).map_err(|e| Error::Data(format!("{}: {}", dir.display(), e)))?;
    io::write_points_bin(&dir.join("points.bin"), &scene.cloud.to_channels())?;
    let rows: Vec<GtBox> = scene
        .boxes
        .iter()
        .map(|b| GtBox {
            frame,
            ..b.clone()
        })
        .collect();
    io::write_gt_csv(&dir.join("gt.csv"), &rows)?;
    io::write_tensor(&dir.join("depth.lxt"), &scene.depth)?;
    for (i, t) in levels.iter().enumerate() {
        io::write_tensor(&dir.join(format!("features_l{}.lxt", i)), t)?;
    }
    Ok(dir)
}

/// Frame directories under a dump root, sorted by frame number.
pub fn list_frames(root: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    let entries =
        fs::read_dir(root).map_err(|e| Error::Data(format!("{}: {}", root.display(), e)))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {}", root.display(), e)))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(num) = name.strip_prefix("frame_") {
            if let Ok(frame) = num.parse::<u32>() {
                out.push((frame, entry.path()));
            }
        }
    }
    out.sort_by_key(|(f, _)| *f);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            objects: vec![
                ObjectSpec {
                    name: "car".into(),
                    count: 2,
                    size: class_size("car").unwrap(),
                },
                ObjectSpec {
                    name: "pedestrian".into(),
                    count: 1,
                    size: class_size("pedestrian").unwrap(),
                },
            ],
            size_jitter: 0.1,
            noise_sigma: 0.02,
            clutter_rate: 0.005,
            points_per_object: 40,
            placement_margin: 1.0,
            calib: canonical_calibration(320, 240, 260.0),
            grid: GridSpec::new((0.0, 25.6), (-12.8, 12.8), (-3.0, 2.0), (0.32, 0.32, 0.5))
                .unwrap(),
        }
    }

    #[test]
    fn rng_streams_are_stable_and_distinct() {
        let a = SplitRng::new(7);
        let mut b = a.split(3);
        let mut c = a.split(3);
        let mut d = a.split(4);
        let (x, y, z) = (b.next_u64(), c.next_u64(), d.next_u64());
        assert_eq!(x, y);
        assert_ne!(x, z);
        let mut u = SplitRng::new(7);
        let vals: Vec<f64> = (0..1000).map(|_| u.uniform01()).collect();
        assert!(vals.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn truncated_noise_respects_bound() {
        let mut rng = SplitRng::new(9);
        for _ in 0..2000 {
            assert!(rng.truncated_normal(0.05).abs() <= 0.2);
        }
        assert_eq!(rng.truncated_normal(0.0), 0.0);
    }

    #[test]
    fn scene_is_deterministic() {
        let a = generate_scene(&small_spec(11)).unwrap();
        let b = generate_scene(&small_spec(11)).unwrap();
        assert_eq!(a.cloud.to_channels(), b.cloud.to_channels());
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert_eq!(x.bbox, y.bbox);
        }
        let c = generate_scene(&small_spec(12)).unwrap();
        assert_ne!(a.cloud.to_channels(), c.cloud.to_channels());
    }

    #[test]
    fn empty_spec_gives_empty_scene() {
        let mut spec = small_spec(1);
        spec.objects.clear();
        spec.clutter_rate = 0.0;
        let s = generate_scene(&spec).unwrap();
        assert!(s.cloud.is_empty());
        assert!(s.depth.data().iter().all(|&v| v == 0.0));
        assert!(s.boxes.is_empty());
    }

    #[test]
    fn object_points_hug_surfaces() {
        let spec = small_spec(21);
        let s = generate_scene(&spec).unwrap();
        let object_points = spec.objects.iter().map(|o| o.count).sum::<usize>()
            * spec.points_per_object;
        for i in 0..object_points {
            let p = s.cloud.positions[i];
            // distance from the point to the nearest box surface
            let near = s
                .boxes
                .iter()
                .map(|g| {
                    let b = &g.bbox;
                    let (cy, sy) = (b.yaw().cos(), b.yaw().sin());
                    let c = b.center();
                    let rel = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    let local = [
                        cy * rel[0] + sy * rel[1],
                        -sy * rel[0] + cy * rel[1],
                        rel[2],
                    ];
                    let half = [b.size()[0] / 2.0, b.size()[1] / 2.0, b.size()[2] / 2.0];
                    let mut sdf = f64::NEG_INFINITY;
                    for k in 0..3 {
                        sdf = sdf.max(local[k].abs() - half[k]);
                    }
                    sdf.abs()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                near <= 4.0 * spec.noise_sigma + 1e-9,
                "point {} is {} m from any surface",
                i,
                near
            );
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let mut spec = small_spec(5);
        spec.objects = vec![ObjectSpec {
            name: "truck".into(),
            count: 500,
            size: class_size("truck").unwrap(),
        }];
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn depth_render_matches_projection() {
        let calib = canonical_calibration(320, 240, 260.0);
        // box straight ahead: radar x forward maps to camera z
        let b = Box3D::new([10.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0).unwrap();
        let depth = render_depth(&[b], &calib);
        let center = depth.at(&[120, 160]);
        // front face at x = 9, on the optical axis
        assert!((center - 9.0).abs() < 1e-4, "center depth {}", center);
        assert_eq!(depth.at(&[0, 0]), 0.0);
    }

    #[test]
    fn ideal_depth_one_hot() {
        let bins = DepthBinSpec::new(1.0, 9.0, 8).unwrap();
        let mut depth = Tensor::zeros(&[1, 3]);
        *depth.at_mut(&[0, 0]) = bins.bin_center(3) as f32;
        *depth.at_mut(&[0, 1]) = 0.0; // sky
        *depth.at_mut(&[0, 2]) = 100.0; // beyond the last bin
        let d = ideal_depth_distribution(&depth, &bins);
        assert_eq!(d.at(&[0, 0, 3]), 1.0);
        let s0: f32 = d.row(&[0, 0]).iter().sum();
        assert_eq!(s0, 1.0);
        assert!(d.row(&[0, 1]).iter().all(|&v| v == 0.0));
        assert!(d.row(&[0, 2]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ideal_occupancy_marks_box_cells() {
        let grid = GridSpec::new((0.0, 8.0), (-4.0, 4.0), (-2.0, 2.0), (0.5, 0.5, 0.5)).unwrap();
        let empty = ideal_occupancy(&[], &grid);
        assert!(empty.data().iter().all(|&v| v == 0.0));

        let b = Box3D::new([4.0, 0.0, 0.0], [4.0, 4.0, 4.0], 0.3).unwrap();
        let occ = ideal_occupancy(&[b.clone()], &grid);
        let cell = grid.cell_of(4.0, 0.0, 0.0).unwrap();
        assert_eq!(occ.at(&[cell.0, cell.1, cell.2]), 1.0);
        let occupied = occ.data().iter().filter(|&&v| v == 1.0).count() as f64;
        let expected = (4.0 * 4.0 * 4.0) / (0.5 * 0.5 * 0.5);
        assert!(
            (occupied - expected).abs() / expected < 0.2,
            "{} cells vs {} expected",
            occupied,
            expected
        );
        assert!(occ.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn frame_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&small_spec(33)).unwrap();
        let mut rng = SplitRng::new(1);
        let feats = vec![seeded_features(&mut rng, &[30, 40, 4])];
        write_frame_dir(dir.path(), 2, &scene, &feats).unwrap();
        let frames = list_frames(dir.path()).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].0, 2);
        let pts = io::read_points_bin(&frames[0].1.join("points.bin"), 7).unwrap();
        assert_eq!(pts, scene.cloud.to_channels());
        let gt = io::read_gt_csv(&frames[0].1.join("gt.csv")).unwrap();
        assert_eq!(gt.len(), scene.boxes.len());
        assert!(gt.iter().all(|g| g.frame == 2));
        let depth = io::read_tensor(&frames[0].1.join("depth.lxt")).unwrap();
        assert_eq!(depth, scene.depth);
        let f0 = io::read_tensor(&frames[0].1.join("features_l0.lxt")).unwrap();
        assert_eq!(f0, feats[0]);
    }
}
