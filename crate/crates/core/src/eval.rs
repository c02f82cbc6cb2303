//! Evaluation protocol: rotated BEV/3D IoU (polygon clipping, with a slow
//! rasterization reference), 40-point interpolated average precision,
//! region-of-interest filters, and report generation.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::CalibrationSet;
use crate::head::{Box3D, Detection, GtBox};

// ---------------------------------------------------------------- IoU

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    Bev,
    ThreeD,
}

/// Signed area of a polygon (positive for counterclockwise order).
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc / 2.0
}

fn line_intersection(p1: [f64; 2], p2: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = [p2[0] - p1[0], p2[1] - p1[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    let t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom;
    [p1[0] + t * d1[0], p1[1] + t * d1[1]]
}

/// Clip a polygon against a convex counterclockwise polygon, one edge at a
/// time (points exactly on an edge count as inside).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            return out;
        }
        let inside =
            |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(line_intersection(prev, cur, a, b)),
                (false, true) => {
                    out.push(line_intersection(prev, cur, a, b));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Area of the BEV footprint intersection of two oriented boxes.
pub fn rotated_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let clipped = clip_polygon(&a.bev_corners(), &b.bev_corners());
    polygon_area(&clipped).max(0.0)
}

fn bev_areas(a: &Box3D, b: &Box3D) -> Result<(f64, f64)> {
    let (sa, sb) = (a.size(), b.size());
    let (area_a, area_b) = (sa[0] * sa[1], sb[0] * sb[1]);
    if !(area_a > 0.0) || !(area_b > 0.0) {
        return Err(Error::DegenerateBox("zero-area footprint".into()));
    }
    Ok((area_a, area_b))
}

/// Intersection over union of two oriented boxes, either on BEV footprints
/// or on volumes (BEV intersection × vertical overlap).
pub fn box_iou(a: &Box3D, b: &Box3D, mode: IouMode) -> Result<f64> {
    let (area_a, area_b) = bev_areas(a, b)?;
    let inter_bev = rotated_intersection_area(a, b);
    let iou = match mode {
        IouMode::Bev => inter_bev / (area_a + area_b - inter_bev),
        IouMode::ThreeD => {
            let (a0, a1) = a.z_range();
            let (b0, b1) = b.z_range();
            let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
            let inter = inter_bev * dz;
            let vol_a = area_a * a.size()[2];
            let vol_b = area_b * b.size()[2];
            inter / (vol_a + vol_b - inter)
        }
    };
    Ok(iou.clamp(0.0, 1.0))
}

/// Monte-Carlo-free IoU reference: count cell centers of an n×n grid over
/// the pair's bounding box that fall in each footprint. Slow; used to
/// cross-check the clipping implementation.
pub fn rasterized_iou(a: &Box3D, b: &Box3D, n: usize) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in a.bev_corners().iter().chain(b.bev_corners().iter()) {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let step = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..n {
        let x = lo[0] + (i as f64 + 0.5) * step[0];
        for j in 0..n {
            let y = lo[1] + (j as f64 + 0.5) * step[1];
            let p = [x, y, a.center()[2]];
            let ia = a.contains([p[0], p[1], a.center()[2]]);
            let ib = b.contains([p[0], p[1], b.center()[2]]);
            if ia && ib {
                both += 1;
            }
            if ia || ib {
                either += 1;
            }
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

// ---------------------------------------------------------------- regions

/// Where AP is measured. Spatial kinds test box centers; the tag kind
/// restricts evaluation to frames whose ground truth carries the tag.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalRegion {
    /// Everything annotated.
    EntireArea,
    /// Camera-frame corridor x_min < x < x_max, z < z_max.
    DrivingCorridor {
        x_min: f64,
        x_max: f64,
        z_max: f64,
    },
    /// BEV range band r_min ≤ √(x²+y²) < r_max in the radar frame.
    DistanceBand { r_min: f64, r_max: f64 },
    SubsetTag(String),
}

impl EvalRegion {
    pub fn corridor_default() -> EvalRegion {
        EvalRegion::DrivingCorridor {
            x_min: -4.0,
            x_max: 4.0,
            z_max: 25.0,
        }
    }

    /// Short name used in report rows and file names.
    pub fn label(&self) -> String {
        match self {
            EvalRegion::EntireArea => "eaa".to_string(),
            EvalRegion::DrivingCorridor { .. } => "corridor".to_string(),
            EvalRegion::DistanceBand { r_min, r_max } => format!("band_{}_{}", r_min, r_max),
            EvalRegion::SubsetTag(t) => format!("tag_{}", t),
        }
    }

    fn allows_center(&self, center: [f64; 3], calib: &CalibrationSet) -> bool {
        match self {
            EvalRegion::EntireArea | EvalRegion::SubsetTag(_) => true,
            EvalRegion::DrivingCorridor { x_min, x_max, z_max } => {
                let cam = calib
                    .radar_to_camera
                    .apply(&nalgebra::Point3::new(center[0], center[1], center[2]));
                cam.x > *x_min && cam.x < *x_max && cam.z < *z_max
            }
            EvalRegion::DistanceBand { r_min, r_max } => {
                let r = (center[0] * center[0] + center[1] * center[1]).sqrt();
                r >= *r_min && r < *r_max
            }
        }
    }
}

/// Keep the boxes whose center satisfies the region's spatial predicate.
/// Tag regions filter by frame, which bare boxes do not carry, so they pass
/// everything here.
pub fn region_filter(boxes: &[Box3D], region: &EvalRegion, calib: &CalibrationSet) -> Vec<Box3D> {
    boxes
        .iter()
        .filter(|b| region.allows_center(b.center(), calib))
        .cloned()
        .collect()
}

fn tagged_frames(gts: &[GtBox], tag: &str) -> BTreeSet<u32> {
    gts.iter()
        .filter(|g| g.tags.iter().any(|t| t == tag))
        .map(|g| g.frame)
        .collect()
}

// ---------------------------------------------------------------- AP

/// Per-class IoU thresholds plus the IoU flavor used for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub iou_mode: IouMode,
    thresholds: Vec<(String, f64)>,
}

impl MatchConfig {
    pub fn new(iou_mode: IouMode, thresholds: Vec<(String, f64)>) -> Result<MatchConfig> {
        for (name, t) in &thresholds {
            if !(*t > 0.0 && *t <= 1.0) {
                return Err(Error::Config(format!(
                    "IoU threshold for '{}' must be in (0, 1], got {}",
                    name, t
                )));
            }
        }
        Ok(MatchConfig {
            iou_mode,
            thresholds,
        })
    }

    pub fn threshold(&self, class: &str) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|(n, _)| n == class)
            .map(|(_, t)| *t)
    }

    pub fn thresholds(&self) -> &[(String, f64)] {
        &self.thresholds
    }
}

/// AP outcome for one det/GT pool. `undefined` marks a region with no
/// ground truth, where AP is reported as 0 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub gt_count: usize,
    pub tp: usize,
    pub fp: usize,
    /// (recall, precision) after each detection, score-descending.
    pub curve: Vec<(f64, f64)>,
}

impl ApResult {
    pub fn undefined(&self) -> bool {
        self.gt_count == 0
    }
}

fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for j in 1..=40 {
        let r = j as f64 / 40.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 40.0
}

/// Greedy score-descending matching inside a region: each detection takes
/// the highest-IoU unmatched same-frame same-class ground truth and counts
/// as a true positive iff that IoU reaches the class threshold. AP is the
/// 40-point interpolated precision average.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GtBox],
    cfg: &MatchConfig,
    region: &EvalRegion,
    calib: &CalibrationSet,
) -> Result<ApResult> {
    let frame_set = match region {
        EvalRegion::SubsetTag(tag) => Some(tagged_frames(gts, tag)),
        _ => None,
    };
    let in_frames = |frame: u32| frame_set.as_ref().map_or(true, |s| s.contains(&frame));

    let gts_f: Vec<&GtBox> = gts
        .iter()
        .filter(|g| in_frames(g.frame) && region.allows_center(g.bbox.center(), calib))
        .collect();
    let mut dets_f: Vec<&Detection> = dets
        .iter()
        .filter(|d| in_frames(d.frame) && region.allows_center(d.bbox.center(), calib))
        .collect();
    dets_f.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.frame.cmp(&b.frame))
            .then(a.class.cmp(&b.class))
            .then(a.bbox.center()[1].total_cmp(&b.bbox.center()[1]))
            .then(a.bbox.center()[0].total_cmp(&b.bbox.center()[0]))
    });

    let gt_count = gts_f.len();
    let mut matched = vec![false; gt_count];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets_f.len());
    for d in dets_f {
        let thr = cfg
            .threshold(&d.class)
            .ok_or_else(|| Error::MissingClassThreshold(d.class.clone()))?;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts_f.iter().enumerate() {
            if matched[gi] || g.frame != d.frame || g.class != d.class {
                continue;
            }
            let iou = box_iou(&d.bbox, &g.bbox, cfg.iou_mode)?;
            if best.map_or(true, |(_, bi)| iou > bi) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= thr => {
                matched[gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push((
            tp as f64 / gt_count.max(1) as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let ap = if gt_count == 0 {
        0.0
    } else {
        interpolated_ap(&curve)
    };
    Ok(ApResult {
        ap,
        gt_count,
        tp,
        fp,
        curve,
    })
}

/// Per-class AP plus the arithmetic mean over all listed classes
/// (classes with no ground truth contribute 0).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanApResult {
    pub per_class: Vec<(String, ApResult)>,
    pub mean: f64,
}

pub fn mean_ap(
    dets: &[Detection],
    gts: &[GtBox],
    classes: &[String],
    cfg: &MatchConfig,
    region: &EvalRegion,
    calib: &CalibrationSet,
) -> Result<MeanApResult> {
    let mut per_class = Vec::with_capacity(classes.len());
    let mut sum = 0.0;
    for class in classes {
        let dets_c: Vec<Detection> = dets.iter().filter(|d| &d.class == class).cloned().collect();
        let gts_c: Vec<GtBox> = gts.iter().filter(|g| &g.class == class).cloned().collect();
        let r = average_precision(&dets_c, &gts_c, cfg, region, calib)?;
        sum += r.ap;
        per_class.push((class.clone(), r));
    }
    let mean = if classes.is_empty() {
        0.0
    } else {
        sum / classes.len() as f64
    };
    Ok(MeanApResult { per_class, mean })
}

// ---------------------------------------------------------------- reports

pub const REPORT_HEADER: &str = "region,class,ap,gt_count,no_gt";

/// One CSV row per (region, class) plus a mean row per region.
pub fn report_csv(results: &[(String, MeanApResult)]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for (region, res) in results {
        for (class, ap) in &res.per_class {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                region,
                class,
                ap.ap,
                ap.gt_count,
                if ap.undefined() { 1 } else { 0 }
            ));
        }
        out.push_str(&format!("{},mean,{},,\n", region, res.mean));
    }
    out
}

/// Standalone SVG precision-recall plot for one class and region.
pub fn pr_curve_svg(class: &str, region: &str, curve: &[(f64, f64)]) -> String {
    let (m, s) = (45.0, 360.0); // margin, plot size
    let px = |r: f64| m + r * s;
    let py = |p: f64| m + s - p * s;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
        (2.0 * m + s) as u32
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for t in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            px(t),
            py(0.0),
            px(t),
            py(1.0)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            px(0.0),
            py(t),
            px(1.0),
            py(t)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            px(t),
            py(0.0) + 16.0,
            t
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            px(0.0) - 6.0,
            py(t) + 4.0,
            t
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{} ({}) recall vs precision</text>\n",
        px(0.5),
        m - 14.0,
        class,
        region
    ));
    if !curve.is_empty() {
        let mut points = vec![format!("{:.2},{:.2}", px(0.0), py(curve[0].1))];
        for (r, p) in curve {
            points.push(format!("{:.2},{:.2}", px(*r), py(*p)));
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#1565c0\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>\n",
        px(0.0),
        py(1.0),
        s,
        s
    ));
    svg.push_str("</svg>\n");
    svg
}
