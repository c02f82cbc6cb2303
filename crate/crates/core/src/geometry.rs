//! Homogeneous-coordinate machinery: camera intrinsics, rigid transforms,
//! voxel lattices, radar-to-image projection, and field-of-view tests.
//!
//! All geometry runs in f64; tensors exchanged with the rest of the pipeline
//! are f32. Image bounds are half-open [0, W) × [0, H) and pixel (u, v)
//! refers to the pixel center, so integer coordinates index pixels directly.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Point3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::io::CalibrationFile;
use crate::tensor::Tensor;

/// Minimum depth for the perspective divide, in meters.
pub const DEPTH_EPS: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-6;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

// ---------------------------------------------------------------- camera

/// Pinhole projection matrix (3×4, pixels) plus the image extent it maps
/// into. The third row must be (0, 0, 1, ·) so row 2 of a projected point
/// is metric depth.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    matrix: Matrix3x4<f64>,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraIntrinsics {
    pub fn new(matrix: Matrix3x4<f64>, image_width: usize, image_height: usize) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return Err(Error::InvalidCalibration("image size must be positive".into()));
        }
        let row2_ok = matrix[(2, 0)].abs() < ORTHO_TOL
            && matrix[(2, 1)].abs() < ORTHO_TOL
            && (matrix[(2, 2)] - 1.0).abs() < ORTHO_TOL;
        if !row2_ok {
            return Err(Error::InvalidCalibration(
                "intrinsic third row must be (0, 0, 1, ·)".into(),
            ));
        }
        if matrix[(0, 0)] <= 0.0 || matrix[(1, 1)] <= 0.0 {
            return Err(Error::InvalidCalibration("focal lengths must be positive".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCalibration("intrinsic has non-finite entries".into()));
        }
        Ok(CameraIntrinsics {
            matrix,
            image_width,
            image_height,
        })
    }

    pub fn from_pinhole(fx: f64, fy: f64, cx: f64, cy: f64, w: usize, h: usize) -> Result<Self> {
        let m = Matrix3x4::new(fx, 0.0, cx, 0.0, 0.0, fy, cy, 0.0, 0.0, 0.0, 1.0, 0.0);
        CameraIntrinsics::new(m, w, h)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.matrix
    }
}

// ---------------------------------------------------------------- transforms

/// 4×4 homogeneous rigid transform: orthonormal rotation block, metric
/// translation, (0,0,0,1) bottom row.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom_ok = matrix[(3, 0)].abs() < ORTHO_TOL
            && matrix[(3, 1)].abs() < ORTHO_TOL
            && matrix[(3, 2)].abs() < ORTHO_TOL
            && (matrix[(3, 3)] - 1.0).abs() < ORTHO_TOL;
        if !bottom_ok {
            return Err(Error::InvalidCalibration(
                "transform bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        let r = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        check_orthonormal(&r)?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCalibration("transform has non-finite entries".into()));
        }
        Ok(RigidTransform { matrix })
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Rigid inverse (Rᵀ, -Rᵀt); no matrix solve involved.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        let t = -rt * self.translation();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        RigidTransform { matrix: m }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        let q = self.matrix * Vector4::new(p.x, p.y, p.z, 1.0);
        Point3::new(q.x, q.y, q.z)
    }

    /// self ∘ other: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            matrix: self.matrix * other.matrix,
        }
    }
}

fn check_orthonormal(r: &Matrix3<f64>) -> Result<()> {
    let gram = r.transpose() * r;
    let dev = (gram - Matrix3::identity()).abs().max();
    if dev >= ORTHO_TOL {
        return Err(Error::InvalidCalibration(format!(
            "rotation is not orthonormal (max deviation {:.2e})",
            dev
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() >= ORTHO_TOL {
        return Err(Error::InvalidCalibration(format!(
            "rotation determinant {} is not 1",
            det
        )));
    }
    Ok(())
}

/// Lift a rotation + translation into homogeneous 4×4 form. With zero
/// translation this is the block matrix [[R, 0], [0, 1]].
pub fn extend_transform(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<RigidTransform> {
    check_orthonormal(rotation)?;
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    RigidTransform::new(m)
}

// ---------------------------------------------------------------- grids

/// Axis-aligned voxel lattice over a point-cloud range. Each extent must be
/// an integer multiple of its cell size; cell counts are derived.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub cell_x: f64,
    pub cell_y: f64,
    pub cell_z: f64,
    nx: usize,
    ny: usize,
    nz: usize,
}

fn derive_count(min: f64, max: f64, cell: f64, axis: &str) -> Result<usize> {
    if !(cell > 0.0 && cell.is_finite() && min.is_finite() && max.is_finite()) {
        return Err(Error::InvalidGrid(format!("{}: bad extent or cell size", axis)));
    }
    if max <= min {
        return Err(Error::InvalidGrid(format!("{}: max must exceed min", axis)));
    }
    let ratio = (max - min) / cell;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::InvalidGrid(format!(
            "{}: extent {} is not an integer multiple of cell {}",
            axis,
            max - min,
            cell
        )));
    }
    Ok(n as usize)
}

impl GridSpec {
    pub fn new(
        x: (f64, f64),
        y: (f64, f64),
        z: (f64, f64),
        cell: (f64, f64, f64),
    ) -> Result<GridSpec> {
        let nx = derive_count(x.0, x.1, cell.0, "x")?;
        let ny = derive_count(y.0, y.1, cell.1, "y")?;
        let nz = derive_count(z.0, z.1, cell.2, "z")?;
        Ok(GridSpec {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
            cell_x: cell.0,
            cell_y: cell.1,
            cell_z: cell.2,
            nx,
            ny,
            nz,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.x_min + (i as f64 + 0.5) * self.cell_x,
            self.y_min + (j as f64 + 0.5) * self.cell_y,
            self.z_min + (k as f64 + 0.5) * self.cell_z,
        ]
    }

    /// Cell containing a point, or None outside the lattice. Points exactly
    /// on the max boundary are outside (cells are half-open).
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        let i = ((x - self.x_min) / self.cell_x).floor();
        let j = ((y - self.y_min) / self.cell_y).floor();
        let k = ((z - self.z_min) / self.cell_z).floor();
        if i < 0.0
            || j < 0.0
            || k < 0.0
            || i >= self.nx as f64
            || j >= self.ny as f64
            || k >= self.nz as f64
        {
            None
        } else {
            Some((i as usize, j as usize, k as usize))
        }
    }

    /// Strict interior test (the point-cloud crop keeps x_min < x < x_max
    /// on every axis).
    pub fn contains_interior(&self, x: f64, y: f64, z: f64) -> bool {
        x > self.x_min
            && x < self.x_max
            && y > self.y_min
            && y < self.y_max
            && z > self.z_min
            && z < self.z_max
    }
}

/// Centers of every voxel as an X×Y×Z×3 tensor, in meters.
pub fn voxel_centers(spec: &GridSpec) -> Tensor {
    let (nx, ny, nz) = (spec.nx, spec.ny, spec.nz);
    let mut t = Tensor::zeros(&[nx, ny, nz, 3]);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let c = spec.voxel_center(i, j, k);
                let row = t.row_mut(&[i, j, k]);
                row[0] = c[0] as f32;
                row[1] = c[1] as f32;
                row[2] = c[2] as f32;
            }
        }
    }
    t
}

// ---------------------------------------------------------------- projection

/// A point projected into the image: real-valued pixel coordinates plus
/// metric depth. `valid` means depth exceeded the divide threshold and
/// (u, v) landed inside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageProjection {
    pub u: f64,
    pub v: f64,
    pub d: f64,
    pub valid: bool,
}

/// Camera intrinsics plus the radar-to-camera extrinsic; everything needed
/// to move between the radar frame and the image.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub camera: CameraIntrinsics,
    pub radar_to_camera: RigidTransform,
}

impl CalibrationSet {
    pub fn new(camera: CameraIntrinsics, radar_to_camera: RigidTransform) -> CalibrationSet {
        CalibrationSet {
            camera,
            radar_to_camera,
        }
    }

    pub fn from_file(file: &CalibrationFile) -> Result<CalibrationSet> {
        let intr = Matrix3x4::from_row_slice(&file.intrinsic);
        let camera = CameraIntrinsics::new(intr, file.image_size.0, file.image_size.1)?;
        let extr = Matrix4::from_row_slice(&file.radar_to_camera);
        let radar_to_camera = RigidTransform::new(extr)?;
        Ok(CalibrationSet {
            camera,
            radar_to_camera,
        })
    }

    pub fn to_file(&self) -> CalibrationFile {
        let mut intrinsic = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                intrinsic[r * 4 + c] = self.camera.matrix()[(r, c)];
            }
        }
        let mut radar_to_camera = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                radar_to_camera[r * 4 + c] = self.radar_to_camera.matrix()[(r, c)];
            }
        }
        CalibrationFile {
            intrinsic,
            radar_to_camera,
            image_size: (self.camera.image_width, self.camera.image_height),
        }
    }

    /// Combined 3×4 map taking homogeneous radar-frame points to
    /// [ud, vd, d].
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        self.camera.matrix() * self.radar_to_camera.matrix()
    }

    pub fn project_point(&self, p: &Point3<f64>) -> ImageProjection {
        project_with(&self.projection_matrix(), &self.camera, p)
    }

    /// Invert the projection: image coordinates plus depth back to the
    /// radar frame.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Result<Point3<f64>> {
        let intr = self.camera.matrix();
        let a = intr.fixed_view::<3, 3>(0, 0).into_owned();
        let b = intr.fixed_view::<3, 1>(0, 3).into_owned();
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| Error::InvalidCalibration("intrinsic 3×3 block is singular".into()))?;
        let cam = a_inv * (Vector3::new(u * d, v * d, d) - b);
        let inv = self.radar_to_camera.inverse();
        Ok(inv.apply(&Point3::new(cam.x, cam.y, cam.z)))
    }
}

fn project_with(
    m: &Matrix3x4<f64>,
    cam: &CameraIntrinsics,
    p: &Point3<f64>,
) -> ImageProjection {
    let w = m * Vector4::new(p.x, p.y, p.z, 1.0);
    let d = w.z;
    if d <= DEPTH_EPS {
        return ImageProjection {
            u: 0.0,
            v: 0.0,
            d,
            valid: false,
        };
    }
    let u = w.x / d;
    let v = w.y / d;
    let valid =
        u >= 0.0 && u < cam.image_width as f64 && v >= 0.0 && v < cam.image_height as f64;
    ImageProjection { u, v, d, valid }
}

/// Project a batch of radar-frame points into the image.
pub fn project_points(points: &[Point3<f64>], calib: &CalibrationSet) -> Vec<ImageProjection> {
    let m = calib.projection_matrix();
    points
        .iter()
        .map(|p| project_with(&m, &calib.camera, p))
        .collect()
}

/// True iff the projection has positive depth and lands inside the image.
/// Works on hand-built projections; the `valid` flag is not consulted.
pub fn in_view(p: &ImageProjection, cam: &CameraIntrinsics) -> bool {
    p.d > 0.0
        && p.u >= 0.0
        && p.u < cam.image_width as f64
        && p.v >= 0.0
        && p.v < cam.image_height as f64
}
