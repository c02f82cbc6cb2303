//! Radar point-cloud handling: channel layout, feature normalization,
//! range and field-of-view filtering, pillarization, and the horizontal
//! flip augmentation.

use std::collections::BTreeMap;

use nalgebra::Point3;

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::{in_view, wrap_angle, CalibrationSet, GridSpec};
use crate::head::Box3D;
use crate::tensor::Tensor;

// ---------------------------------------------------------------- layout

/// Names of the columns in a raw point file, with the coordinate and time
/// channels located by name. Datasets differ in channel order and count,
/// so the layout comes from config rather than being hard-coded.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    names: Vec<String>,
    x: usize,
    y: usize,
    z: usize,
    t: Option<usize>,
}

impl ChannelLayout {
    pub fn new(names: Vec<String>) -> Result<ChannelLayout> {
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::Data(format!("channel layout: duplicate name '{}'", a)));
            }
        }
        let find = |n: &str| names.iter().position(|s| s == n);
        let (x, y, z) = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => {
                return Err(Error::Data(
                    "channel layout: x, y, z channels are required".into(),
                ))
            }
        };
        let t = find("t");
        Ok(ChannelLayout { names, x, y, z, t })
    }

    /// VoD-style 7-channel layout.
    pub fn vod() -> ChannelLayout {
        ChannelLayout::new(
            ["x", "y", "z", "rcs", "v_r", "v_r_comp", "t"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    /// Indices of the channels that normalization leaves untouched
    /// (coordinates and, when present, time).
    pub fn skip_indices(&self) -> Vec<usize> {
        let mut v = vec![self.x, self.y, self.z];
        if let Some(t) = self.t {
            v.push(t);
        }
        v.sort_unstable();
        v
    }

    /// Names of the non-coordinate, non-time columns, in layout order.
    pub fn feature_names(&self) -> Vec<String> {
        self.names
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_skip(*i))
            .map(|(_, n)| n.clone())
            .collect()
    }

    fn is_skip(&self, i: usize) -> bool {
        i == self.x || i == self.y || i == self.z || self.t == Some(i)
    }
}

// ---------------------------------------------------------------- cloud

/// Point cloud split into positions (meters), non-coordinate feature
/// columns, and timestamps. An empty cloud is legal.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarPointCloud {
    pub layout: ChannelLayout,
    pub positions: Vec<[f64; 3]>,
    /// N×F, the layout's feature columns in order.
    pub features: Tensor,
    /// Empty when the layout has no time channel.
    pub timestamps: Vec<f32>,
}

impl RadarPointCloud {
    pub fn from_channels(matrix: &Tensor, layout: ChannelLayout) -> Result<RadarPointCloud> {
        if matrix.rank() != 2 || matrix.shape()[1] != layout.channels() {
            return Err(shape_mismatch(
                "point matrix",
                format!("N×{}", layout.channels()),
                format!("{:?}", matrix.shape()),
            ));
        }
        let n = matrix.shape()[0];
        let f = layout.channels() - layout.skip_indices().len();
        let mut positions = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * f);
        let mut timestamps = Vec::with_capacity(if layout.t.is_some() { n } else { 0 });
        for p in 0..n {
            let row = matrix.row(&[p]);
            let pos = [
                row[layout.x] as f64,
                row[layout.y] as f64,
                row[layout.z] as f64,
            ];
            if pos.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("point {}: non-finite position", p)));
            }
            positions.push(pos);
            if let Some(t) = layout.t {
                timestamps.push(row[t]);
            }
            for (c, &v) in row.iter().enumerate() {
                if !layout.is_skip(c) {
                    features.push(v);
                }
            }
        }
        Ok(RadarPointCloud {
            layout,
            positions,
            features: Tensor::from_vec(&[n, f], features)?,
            timestamps,
        })
    }

    /// Rebuild the N×C channel matrix in the cloud's layout order.
    pub fn to_channels(&self) -> Tensor {
        let n = self.len();
        let c = self.layout.channels();
        let mut out = Tensor::zeros(&[n, c]);
        for p in 0..n {
            let mut fi = 0;
            for col in 0..c {
                let v = if col == self.layout.x {
                    self.positions[p][0] as f32
                } else if col == self.layout.y {
                    self.positions[p][1] as f32
                } else if col == self.layout.z {
                    self.positions[p][2] as f32
                } else if self.layout.t == Some(col) {
                    self.timestamps[p]
                } else {
                    let v = self.features.at(&[p, fi]);
                    fi += 1;
                    v
                };
                *out.at_mut(&[p, col]) = v;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn select(&self, keep: &[usize]) -> RadarPointCloud {
        let f = self.features.shape()[1];
        let mut features = Vec::with_capacity(keep.len() * f);
        for &i in keep {
            features.extend_from_slice(self.features.row(&[i]));
        }
        RadarPointCloud {
            layout: self.layout.clone(),
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            features: Tensor::from_vec(&[keep.len(), f], features).unwrap(),
            timestamps: if self.timestamps.is_empty() {
                Vec::new()
            } else {
                keep.iter().map(|&i| self.timestamps[i]).collect()
            },
        }
    }
}

// ---------------------------------------------------------------- normalization

/// Per-channel mean and standard deviation. Standard deviations must be
/// strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(means: Vec<f64>, stds: Vec<f64>) -> Result<NormalizationStats> {
        if means.len() != stds.len() {
            return Err(Error::InvalidStats(format!(
                "{} means vs {} stds",
                means.len(),
                stds.len()
            )));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidStats("non-finite mean".into()));
        }
        for &s in &stds {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidStats(format!("std {} must be positive", s)));
            }
        }
        Ok(NormalizationStats { means, stds })
    }

    pub fn identity(channels: usize) -> NormalizationStats {
        NormalizationStats {
            means: vec![0.0; channels],
            stds: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }
}

fn check_norm_args(values: &Tensor, stats: &NormalizationStats, skip: &[usize]) -> Result<usize> {
    if values.rank() != 2 {
        return Err(shape_mismatch("normalize", "N×C", format!("{:?}", values.shape())));
    }
    let c = values.shape()[1];
    if stats.channels() != c {
        return Err(Error::InvalidStats(format!(
            "stats cover {} channels, data has {}",
            stats.channels(),
            c
        )));
    }
    if let Some(&bad) = skip.iter().find(|&&s| s >= c) {
        return Err(Error::InvalidStats(format!(
            "skip index {} out of range for {} channels",
            bad, c
        )));
    }
    Ok(c)
}

/// (v - mean) / std per channel, leaving skip channels untouched.
pub fn normalize(values: &Tensor, stats: &NormalizationStats, skip: &[usize]) -> Result<Tensor> {
    let c = check_norm_args(values, stats, skip)?;
    let n = values.shape()[0];
    let mut out = values.clone();
    for p in 0..n {
        let row = out.row_mut(&[p]);
        for ch in 0..c {
            if !skip.contains(&ch) {
                row[ch] = ((row[ch] as f64 - stats.means[ch]) / stats.stds[ch]) as f32;
            }
        }
    }
    Ok(out)
}

/// Inverse of `normalize` with the same stats and skip set.
pub fn denormalize(values: &Tensor, stats: &NormalizationStats, skip: &[usize]) -> Result<Tensor> {
    let c = check_norm_args(values, stats, skip)?;
    let n = values.shape()[0];
    let mut out = values.clone();
    for p in 0..n {
        let row = out.row_mut(&[p]);
        for ch in 0..c {
            if !skip.contains(&ch) {
                row[ch] = (row[ch] as f64 * stats.stds[ch] + stats.means[ch]) as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- filters

/// Keep exactly the points strictly inside the range on every axis.
pub fn crop_to_range(cloud: &RadarPointCloud, spec: &GridSpec) -> RadarPointCloud {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = cloud.positions[i];
            spec.contains_interior(p[0], p[1], p[2])
        })
        .collect();
    cloud.select(&keep)
}

/// Keep points whose projection lands in the image, and boxes whose center
/// projection does.
pub fn fov_filter(
    cloud: &RadarPointCloud,
    boxes: &[Box3D],
    calib: &CalibrationSet,
) -> (RadarPointCloud, Vec<Box3D>) {
    let visible = |p: &[f64; 3]| {
        let proj = calib.project_point(&Point3::new(p[0], p[1], p[2]));
        proj.valid && in_view(&proj, &calib.camera)
    };
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| visible(&cloud.positions[i]))
        .collect();
    let boxes_kept = boxes
        .iter()
        .filter(|b| visible(&b.center()))
        .cloned()
        .collect();
    (cloud.select(&keep), boxes_kept)
}

// ---------------------------------------------------------------- pillars

/// Non-empty BEV cells and their member points. Coordinates are unique and
/// lexicographically sorted; members keep ascending point order, so the
/// structure is deterministic regardless of how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarIndex {
    pub coords: Vec<(usize, usize)>,
    pub members: Vec<Vec<usize>>,
}

impl PillarIndex {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Assign each point to the BEV cell containing its (x, y); z is ignored.
/// Points outside the lattice (possible only if the cloud was not cropped)
/// are dropped.
pub fn pillarize(cloud: &RadarPointCloud, spec: &GridSpec) -> PillarIndex {
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let ix = ((p[0] - spec.x_min) / spec.cell_x).floor();
        let iy = ((p[1] - spec.y_min) / spec.cell_y).floor();
        if ix < 0.0 || iy < 0.0 || ix >= spec.nx() as f64 || iy >= spec.ny() as f64 {
            continue;
        }
        buckets
            .entry((ix as usize, iy as usize))
            .or_default()
            .push(i);
    }
    let mut coords = Vec::with_capacity(buckets.len());
    let mut members = Vec::with_capacity(buckets.len());
    for (c, m) in buckets {
        coords.push(c);
        members.push(m);
    }
    PillarIndex { coords, members }
}

// ---------------------------------------------------------------- flip

/// Mirror the scene across the x-z plane: image flipped along width,
/// radar y negated, box y negated and yaw reflected. Applying it twice is
/// the identity.
pub fn horizontal_flip(
    cloud: &RadarPointCloud,
    boxes: &[Box3D],
    image: &Tensor,
) -> Result<(RadarPointCloud, Vec<Box3D>, Tensor)> {
    if image.rank() != 3 {
        return Err(shape_mismatch("flip image", "H×W×C", format!("{:?}", image.shape())));
    }
    let mut flipped = cloud.clone();
    for p in &mut flipped.positions {
        p[1] = -p[1];
    }
    let boxes_out: Result<Vec<Box3D>> = boxes
        .iter()
        .map(|b| {
            let c = b.center();
            Box3D::new([c[0], -c[1], c[2]], b.size(), wrap_angle(-b.yaw()))
        })
        .collect();
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut img = Tensor::zeros(&[h, w, ch]);
    for r in 0..h {
        for c in 0..w {
            let src = image.row(&[r, w - 1 - c]);
            img.row_mut(&[r, c]).copy_from_slice(src);
        }
    }
    Ok((flipped, boxes_out?, img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use approx::assert_relative_eq;

    fn vod_pcr_pillars() -> GridSpec {
        GridSpec::new((0.0, 51.2), (-25.6, 25.6), (-3.0, 2.0), (0.16, 0.16, 5.0)).unwrap()
    }

    fn cloud_from_xyz(points: &[[f32; 3]]) -> RadarPointCloud {
        let layout = ChannelLayout::new(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let flat: Vec<f32> = points.iter().flatten().copied().collect();
        let m = Tensor::from_vec(&[points.len(), 3], flat).unwrap();
        RadarPointCloud::from_channels(&m, layout).unwrap()
    }

    #[test]
    fn layout_vod_skips() {
        let l = ChannelLayout::vod();
        assert_eq!(l.channels(), 7);
        assert_eq!(l.skip_indices(), vec![0, 1, 2, 6]);
        assert_eq!(l.feature_names(), vec!["rcs", "v_r", "v_r_comp"]);
    }

    #[test]
    fn layout_requires_xyz() {
        assert!(ChannelLayout::new(vec!["x".into(), "y".into()]).is_err());
        assert!(ChannelLayout::new(vec!["x".into(), "x".into(), "y".into(), "z".into()]).is_err());
    }

    #[test]
    fn channel_split_round_trip() {
        let layout = ChannelLayout::vod();
        let m = Tensor::from_vec(
            &[2, 7],
            vec![
                1.0, 2.0, 0.5, -10.0, 3.0, 2.5, 0.0, 4.0, -1.0, 0.25, 5.0, -2.0, -1.5, 1.0,
            ],
        )
        .unwrap();
        let cloud = RadarPointCloud::from_channels(&m, layout).unwrap();
        assert_eq!(cloud.positions[1], [4.0, -1.0, 0.25]);
        assert_eq!(cloud.timestamps, vec![0.0, 1.0]);
        assert_eq!(cloud.features.shape(), &[2, 3]);
        assert_eq!(cloud.to_channels(), m);
    }

    #[test]
    fn normalize_examples() {
        let stats = NormalizationStats::new(vec![5.0, 2.0], vec![2.0, 4.0]).unwrap();
        let v = Tensor::from_vec(&[2, 2], vec![5.0, 10.0, 9.0, 2.0]).unwrap();
        let out = normalize(&v, &stats, &[1]).unwrap();
        assert_eq!(out.at(&[0, 0]), 0.0); // at its mean
        assert_eq!(out.at(&[0, 1]), 10.0); // skipped channel untouched
        assert_eq!(out.at(&[1, 0]), 2.0); // mean + 2 std
        let back = denormalize(&out, &stats, &[1]).unwrap();
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn stats_reject_zero_std() {
        assert!(NormalizationStats::new(vec![0.0], vec![0.0]).is_err());
        assert!(NormalizationStats::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn crop_is_strict_interior() {
        let spec = GridSpec::new((0.0, 51.2), (-25.6, 25.6), (-3.0, 2.0), (0.16, 0.16, 5.0)).unwrap();
        let cloud = cloud_from_xyz(&[
            [25.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [51.2, 0.0, 0.0],
        ]);
        let cropped = crop_to_range(&cloud, &spec);
        assert_eq!(cropped.len(), 1);
        assert_eq!(cropped.positions[0], [25.0, 0.0, 0.0]);
        let empty = crop_to_range(&cloud_from_xyz(&[]), &spec);
        assert!(empty.is_empty());
    }

    #[test]
    fn fov_filter_points_and_boxes() {
        let cam = CameraIntrinsics::from_pinhole(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap();
        let calib = CalibrationSet::new(cam, RigidTransform::identity());
        let cloud = cloud_from_xyz(&[[0.0, 0.0, 10.0], [0.0, 0.0, -5.0], [100.0, 0.0, 1.0]]);
        let boxes = vec![
            Box3D::new([0.0, 0.0, 20.0], [1.0, 1.0, 1.0], 0.0).unwrap(),
            Box3D::new([0.0, 0.0, -20.0], [1.0, 1.0, 1.0], 0.0).unwrap(),
        ];
        let (c2, b2) = fov_filter(&cloud, &boxes, &calib);
        assert_eq!(c2.len(), 1);
        assert_eq!(c2.positions[0], [0.0, 0.0, 10.0]);
        assert_eq!(b2.len(), 1);
        assert_eq!(b2[0].center()[2], 20.0);
        let (c3, b3) = fov_filter(&c2, &b2, &calib);
        assert_eq!(c3, c2);
        assert_eq!(b3.len(), b2.len());
    }

    #[test]
    fn pillar_floor_assignment() {
        let spec = vod_pcr_pillars();
        assert_eq!(spec.nx(), 320);
        let cloud = cloud_from_xyz(&[[0.08, -25.52, 0.0]]);
        let idx = pillarize(&cloud, &spec);
        assert_eq!(idx.coords, vec![(0, 0)]);
        assert_eq!(idx.members, vec![vec![0]]);
    }

    #[test]
    fn pillar_groups_same_cell() {
        let spec = vod_pcr_pillars();
        let cloud = cloud_from_xyz(&[[10.01, 0.01, 0.0], [10.05, 0.05, 1.0], [10.30, 0.01, 0.0]]);
        let idx = pillarize(&cloud, &spec);
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.members[0], vec![0, 1]);
        let total: usize = idx.members.iter().map(|m| m.len()).sum();
        assert_eq!(total, 3);
        let mut sorted = idx.coords.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted, idx.coords);
    }

    #[test]
    fn flip_examples_and_involution() {
        let cloud = cloud_from_xyz(&[[1.0, 2.0, 0.0], [5.0, -3.0, 1.0]]);
        let boxes = vec![Box3D::new([2.0, 1.0, 0.0], [4.0, 2.0, 1.5], std::f64::consts::FRAC_PI_4).unwrap()];
        let image = Tensor::from_vec(&[1, 3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let (c1, b1, i1) = horizontal_flip(&cloud, &boxes, &image).unwrap();
        assert_eq!(c1.positions[0], [1.0, -2.0, 0.0]);
        assert_relative_eq!(b1[0].yaw(), -std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
        assert_eq!(i1.row(&[0, 0]), image.row(&[0, 2]));
        let (c2, b2, i2) = horizontal_flip(&c1, &b1, &i1).unwrap();
        assert_eq!(c2, cloud);
        assert_eq!(i2, image);
        assert_relative_eq!(b2[0].yaw(), boxes[0].yaw(), epsilon = 1e-12);
        assert_eq!(b2[0].center(), boxes[0].center());
    }
}
