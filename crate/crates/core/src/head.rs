//! Center-based detection machinery: oriented 3D boxes, Gaussian heatmap
//! target generation, top-k peak decoding, and per-class distance NMS.
//!
//! Heatmaps are K×X×Y (one BEV plane per class); regression maps are
//! X×Y×8 with channels (Δx, Δy, z, log l, log w, log h, sin yaw, cos yaw),
//! offsets in meters relative to the cell center.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::{wrap_angle, GridSpec};
use crate::tensor::Tensor;

pub const REGRESSION_CHANNELS: usize = 8;

// ---------------------------------------------------------------- boxes

/// Oriented box: center (x, y, z of the volumetric center, meters), size
/// (l, w, h, meters), yaw about +z in radians. Sizes must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Box3D> {
        if center.iter().any(|v| !v.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite center or yaw".into()));
        }
        if size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidBox(format!(
                "sizes must be positive, got {:?}",
                size
            )));
        }
        Ok(Box3D { center, size, yaw })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// Vertical extent [bottom, top].
    pub fn z_range(&self) -> (f64, f64) {
        let half = self.size[2] / 2.0;
        (self.center[2] - half, self.center[2] + half)
    }

    /// The four BEV footprint corners, counterclockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let u = [c * hl, s * hl];
        let v = [-s * hw, c * hw];
        let p = |a: f64, b: f64| {
            [
                self.center[0] + a * u[0] + b * v[0],
                self.center[1] + a * u[1] + b * v[1],
            ]
        };
        [p(1.0, 1.0), p(-1.0, 1.0), p(-1.0, -1.0), p(1.0, -1.0)]
    }

    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// True if a point is inside the oriented box (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dz = p[2] - self.center[2];
        if dz.abs() > self.size[2] / 2.0 {
            return false;
        }
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        along.abs() <= self.size[0] / 2.0 && across.abs() <= self.size[1] / 2.0
    }
}

/// A scored, classified box belonging to a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub class: String,
    pub score: f32,
    pub bbox: Box3D,
}

/// An annotated box, optionally tagged (tags drive evaluation subsets).
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub frame: u32,
    pub class: String,
    pub bbox: Box3D,
    pub tags: Vec<String>,
}

// ---------------------------------------------------------------- targets

/// Radius at which a same-size box shifted by r still overlaps the original
/// with IoU ≥ min_overlap; the smallest root over the three contact cases.
/// Sizes are in cells.
pub fn gaussian_radius(size_cells: (f64, f64), min_overlap: f64) -> f64 {
    let (h, w) = size_cells;

    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).sqrt()) / 8.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / (2.0 * a3);

    r1.min(r2).min(r3)
}

fn center_cell(b: &Box3D, spec: &GridSpec) -> Option<(usize, usize)> {
    let c = b.center();
    let ix = ((c[0] - spec.x_min) / spec.cell_x).floor();
    let iy = ((c[1] - spec.y_min) / spec.cell_y).floor();
    if ix < 0.0 || iy < 0.0 || ix >= spec.nx() as f64 || iy >= spec.ny() as f64 {
        None
    } else {
        Some((ix as usize, iy as usize))
    }
}

/// Splat one Gaussian per box onto its class plane, combining overlaps by
/// element-wise max. The splat radius is the overlap-0.7 size-derived
/// radius, floored, never below `min_radius`; every box center cell gets
/// the exact peak value 1. Boxes whose center lies outside the grid are
/// skipped.
pub fn heatmap_targets(
    boxes: &[(usize, Box3D)],
    num_classes: usize,
    spec: &GridSpec,
    min_radius: usize,
) -> Result<Tensor> {
    let (nx, ny) = (spec.nx(), spec.ny());
    let mut hm = Tensor::zeros(&[num_classes, nx, ny]);
    for (class, b) in boxes {
        if *class >= num_classes {
            return Err(Error::InvalidBox(format!(
                "class index {} with {} classes",
                class, num_classes
            )));
        }
        let Some((ix, iy)) = center_cell(b, spec) else {
            continue;
        };
        let size = b.size();
        let r_size = gaussian_radius((size[0] / spec.cell_x, size[1] / spec.cell_y), 0.7);
        let r = (r_size.max(0.0).floor() as usize).max(min_radius);
        let sigma = (2.0 * r as f64 + 1.0) / 6.0;
        let ri = r as isize;
        for dx in -ri..=ri {
            for dy in -ri..=ri {
                let (px, py) = (ix as isize + dx, iy as isize + dy);
                if px < 0 || py < 0 || px >= nx as isize || py >= ny as isize {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() as f32;
                let slot = hm.at_mut(&[*class, px as usize, py as usize]);
                if g > *slot {
                    *slot = g;
                }
            }
        }
    }
    Ok(hm)
}

/// Perfect training targets for a box set: the Gaussian heatmap plus a
/// regression map holding each box's parameters at its center cell. If two
/// boxes land in the same cell the later one wins.
pub fn encode_targets(
    boxes: &[(usize, Box3D)],
    num_classes: usize,
    spec: &GridSpec,
    min_radius: usize,
) -> Result<(Tensor, Tensor)> {
    let hm = heatmap_targets(boxes, num_classes, spec, min_radius)?;
    let mut reg = Tensor::zeros(&[spec.nx(), spec.ny(), REGRESSION_CHANNELS]);
    for (_, b) in boxes {
        let Some((ix, iy)) = center_cell(b, spec) else {
            continue;
        };
        let cell = spec.voxel_center(ix, iy, 0);
        let c = b.center();
        let s = b.size();
        let row = reg.row_mut(&[ix, iy]);
        row[0] = (c[0] - cell[0]) as f32;
        row[1] = (c[1] - cell[1]) as f32;
        row[2] = c[2] as f32;
        row[3] = s[0].ln() as f32;
        row[4] = s[1].ln() as f32;
        row[5] = s[2].ln() as f32;
        row[6] = b.yaw().sin() as f32;
        row[7] = b.yaw().cos() as f32;
    }
    Ok((hm, reg))
}

// ---------------------------------------------------------------- decode

/// Take the k highest-scoring (class, cell) pairs and rebuild a box from
/// the regression channels at each. Score ties break by ascending
/// (class, y, x) so the result is deterministic.
pub fn decode_detections(
    heatmap: &Tensor,
    regression: &Tensor,
    k: usize,
    spec: &GridSpec,
    classes: &[String],
    frame: u32,
) -> Result<Vec<Detection>> {
    if k == 0 {
        return Err(Error::Config("decode: k must be positive".into()));
    }
    let (nx, ny) = (spec.nx(), spec.ny());
    if heatmap.shape() != [classes.len(), nx, ny] {
        return Err(shape_mismatch(
            "heatmap",
            format!("{}×{}×{}", classes.len(), nx, ny),
            format!("{:?}", heatmap.shape()),
        ));
    }
    if regression.shape() != [nx, ny, REGRESSION_CHANNELS] {
        return Err(shape_mismatch(
            "regression map",
            format!("{}×{}×{}", nx, ny, REGRESSION_CHANNELS),
            format!("{:?}", regression.shape()),
        ));
    }
    let mut candidates: Vec<(f32, usize, usize, usize)> =
        Vec::with_capacity(classes.len() * nx * ny);
    for c in 0..classes.len() {
        for x in 0..nx {
            for y in 0..ny {
                candidates.push((heatmap.at(&[c, x, y]), c, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.3.cmp(&b.3))
            .then(a.2.cmp(&b.2))
    });
    candidates.truncate(k);

    let mut dets = Vec::with_capacity(candidates.len());
    for (score, c, x, y) in candidates {
        let cell = spec.voxel_center(x, y, 0);
        let r = regression.row(&[x, y]);
        let center = [cell[0] + r[0] as f64, cell[1] + r[1] as f64, r[2] as f64];
        let size = [
            (r[3] as f64).exp(),
            (r[4] as f64).exp(),
            (r[5] as f64).exp(),
        ];
        let yaw = wrap_angle((r[6] as f64).atan2(r[7] as f64));
        dets.push(Detection {
            frame,
            class: classes[c].clone(),
            score,
            bbox: Box3D::new(center, size, yaw)?,
        });
    }
    Ok(dets)
}

// ---------------------------------------------------------------- NMS

/// Greedy score-descending suppression within each frame: a detection is
/// dropped iff a higher-ranked kept detection of the same class sits closer
/// than the class threshold in BEV. Ties break by ascending
/// (class, center y, center x). Output is grouped by ascending frame, each
/// group in rank order.
pub fn distance_nms(
    dets: &[Detection],
    thresholds: &[(String, f64)],
) -> Result<Vec<Detection>> {
    let mut by_name: HashMap<&str, (usize, f64)> = HashMap::new();
    for (i, (name, dist)) in thresholds.iter().enumerate() {
        if !(*dist > 0.0 && dist.is_finite()) {
            return Err(Error::MissingClassThreshold(format!(
                "class '{}' has non-positive NMS distance {}",
                name, dist
            )));
        }
        by_name.insert(name.as_str(), (i, *dist));
    }
    let mut frames: BTreeMap<u32, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        if !by_name.contains_key(d.class.as_str()) {
            return Err(Error::MissingClassThreshold(d.class.clone()));
        }
        frames.entry(d.frame).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, mut group) in frames {
        group.sort_by(|a, b| {
            let (ca, _) = by_name[a.class.as_str()];
            let (cb, _) = by_name[b.class.as_str()];
            b.score
                .total_cmp(&a.score)
                .then(ca.cmp(&cb))
                .then(a.bbox.center()[1].total_cmp(&b.bbox.center()[1]))
                .then(a.bbox.center()[0].total_cmp(&b.bbox.center()[0]))
        });
        let mut kept: Vec<&Detection> = Vec::new();
        for d in group {
            let (_, dist) = by_name[d.class.as_str()];
            let suppressed = kept
                .iter()
                .any(|k| k.class == d.class && k.bbox.bev_distance(&d.bbox) < dist);
            if !suppressed {
                kept.push(d);
            }
        }
        out.extend(kept.into_iter().cloned());
    }
    Ok(out)
}
