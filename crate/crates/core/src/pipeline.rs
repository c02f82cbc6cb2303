//! End-to-end frame processing: radar BEV features, occupancy and depth
//! nets, the selected lifting strategy, height compression, BEV fusion,
//! and center-based decoding. Every stage checks its output for NaN/Inf
//! and tags errors with the stage name.

use std::path::Path;

use crate::config::{PipelineConfig, Strategy};
use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::voxel_centers;
use crate::head::{decode_detections, distance_nms, Detection};
use crate::io::{self, Archive};
use crate::lifting::{
    crn_frustum_occupancy, depth_weight, height_compress, occupancy_weight, sample_lift,
    splat_lift, trilinear_sample_depth,
};
use crate::nets::{conv1x1, depth_net, fuse_bev, occupancy_net, Conv1x1Weights};
use crate::pointcloud::{crop_to_range, fov_filter, normalize, pillarize, RadarPointCloud};
use crate::synth::SplitRng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------- weights

/// Classification heads start at a strong background prior so that
/// without trained weights a featureless frame scores below any sane
/// detection threshold.
const BACKGROUND_PRIOR_LOGIT: f32 = -4.59512; // sigmoid ≈ 0.01

/// Every learned map in the pipeline, keyed in archives as
/// `occ.*`, `depth.<level>.*`, `compress.*`, `fuse.*`, `head.heatmap.*`,
/// `head.regress.*` (weight + bias each).
#[derive(Debug, Clone)]
pub struct PipelineWeights {
    pub occ: Conv1x1Weights,
    pub depth: Vec<Conv1x1Weights>,
    pub compress: Conv1x1Weights,
    pub fuse: Conv1x1Weights,
    pub heatmap: Conv1x1Weights,
    pub regress: Conv1x1Weights,
}

struct WeightDims {
    occ: (usize, usize),
    depth: (usize, usize),
    compress: (usize, usize),
    fuse: (usize, usize),
    heatmap: (usize, usize),
    regress: (usize, usize),
}

fn weight_dims(cfg: &PipelineConfig) -> WeightDims {
    let (cp, ci, cf) = (
        cfg.radar_channels(),
        cfg.image_channels,
        cfg.bev_channels,
    );
    WeightDims {
        occ: (cfg.grid.nz(), cp),
        depth: (cfg.bins.bins, ci),
        compress: (ci, cfg.grid.nz() * 2 * ci),
        fuse: (cf, cp + ci),
        heatmap: (cfg.classes.len(), cf),
        regress: (crate::head::REGRESSION_CHANNELS, cf),
    }
}

impl PipelineWeights {
    /// Deterministic stand-in weights derived from the config seed.
    pub fn seeded(cfg: &PipelineConfig) -> PipelineWeights {
        let dims = weight_dims(cfg);
        let root = SplitRng::new(cfg.seed);
        let mk = |(c_out, c_in): (usize, usize), label: u64| {
            Conv1x1Weights::seeded(c_out, c_in, &mut root.split(label))
        };
        let heatmap = {
            let base = mk(dims.heatmap, 50);
            Conv1x1Weights::new(
                base.weight().clone(),
                vec![BACKGROUND_PRIOR_LOGIT; dims.heatmap.0],
            )
            .expect("seeded weights are finite")
        };
        PipelineWeights {
            occ: mk(dims.occ, 10),
            depth: (0..cfg.strides.len())
                .map(|i| mk(dims.depth, 20 + i as u64))
                .collect(),
            compress: mk(dims.compress, 40),
            fuse: mk(dims.fuse, 30),
            heatmap,
            regress: mk(dims.regress, 51),
        }
    }

    pub fn from_archive(archive: &Archive, cfg: &PipelineConfig) -> Result<PipelineWeights> {
        let dims = weight_dims(cfg);
        let read = |name: &str, (c_out, c_in): (usize, usize)| -> Result<Conv1x1Weights> {
            let w = archive.require(&format!("{}.weight", name))?;
            if w.shape() != [c_out, c_in] {
                return Err(shape_mismatch(
                    format!("{}.weight", name),
                    format!("{}×{}", c_out, c_in),
                    format!("{:?}", w.shape()),
                ));
            }
            let b = archive.require(&format!("{}.bias", name))?;
            if b.shape() != [c_out] {
                return Err(shape_mismatch(
                    format!("{}.bias", name),
                    format!("{}", c_out),
                    format!("{:?}", b.shape()),
                ));
            }
            Conv1x1Weights::new(w.clone(), b.data().to_vec())
        };
        Ok(PipelineWeights {
            occ: read("occ", dims.occ)?,
            depth: (0..cfg.strides.len())
                .map(|i| read(&format!("depth.{}", i), dims.depth))
                .collect::<Result<_>>()?,
            compress: read("compress", dims.compress)?,
            fuse: read("fuse", dims.fuse)?,
            heatmap: read("head.heatmap", dims.heatmap)?,
            regress: read("head.regress", dims.regress)?,
        })
    }

    /// Archive from `override_path`, else from the config's weights path,
    /// else seeded.
    pub fn load(cfg: &PipelineConfig, override_path: Option<&Path>) -> Result<PipelineWeights> {
        let path = override_path.or(cfg.weights.as_deref());
        match path {
            Some(p) => PipelineWeights::from_archive(&Archive::read(p)?, cfg),
            None => Ok(PipelineWeights::seeded(cfg)),
        }
    }

    /// Named tensors in the archive layout `from_archive` expects.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: &str, w: &Conv1x1Weights| {
            out.push((format!("{}.weight", name), w.weight().clone()));
            let bias = Tensor::from_vec(&[w.c_out()], w.bias().to_vec())
                .expect("bias length matches c_out");
            out.push((format!("{}.bias", name), bias));
        };
        push("occ", &self.occ);
        for (i, d) in self.depth.iter().enumerate() {
            push(&format!("depth.{}", i), d);
        }
        push("compress", &self.compress);
        push("fuse", &self.fuse);
        push("head.heatmap", &self.heatmap);
        push("head.regress", &self.regress);
        out
    }
}

// ---------------------------------------------------------------- inputs

#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame: u32,
    /// Raw point matrix, N × layout channels.
    pub points: Tensor,
    /// Backbone feature maps, one [H_l, W_l, C_I] tensor per level.
    pub features: Vec<Tensor>,
}

/// Load one dumped frame directory (points.bin + features_l<i>.lxt).
pub fn read_frame_input(dir: &Path, cfg: &PipelineConfig, frame: u32) -> Result<FrameInput> {
    let points = io::read_points_bin(&dir.join("points.bin"), cfg.layout.channels())?;
    let mut features = Vec::with_capacity(cfg.strides.len());
    for li in 0..cfg.strides.len() {
        let t = io::read_tensor(&dir.join(format!("features_l{}.lxt", li)))?;
        features.push(t);
    }
    Ok(FrameInput {
        frame,
        points,
        features,
    })
}

fn check_features(cfg: &PipelineConfig, features: &[Tensor]) -> Result<()> {
    if features.len() != cfg.strides.len() {
        return Err(shape_mismatch(
            "feature levels",
            format!("{}", cfg.strides.len()),
            format!("{}", features.len()),
        ));
    }
    for (li, t) in features.iter().enumerate() {
        let (h, w) = cfg.level_shape(li);
        if t.shape() != [h, w, cfg.image_channels] {
            return Err(shape_mismatch(
                format!("features level {}", li),
                format!("{}×{}×{}", h, w, cfg.image_channels),
                format!("{:?}", t.shape()),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- provider

/// Radar BEV features without a learned backbone: per-pillar means of the
/// point feature columns plus a log point-count channel, mean-pooled from
/// the pillar lattice down to the BEV grid.
pub fn radar_bev_features(cloud: &RadarPointCloud, cfg: &PipelineConfig) -> Result<Tensor> {
    let pillars = pillarize(cloud, &cfg.pillar_grid);
    let f = cfg.layout.feature_names().len();
    let c = f + 1;
    let (px, py) = (cfg.pillar_grid.nx(), cfg.pillar_grid.ny());
    let mut pillar_map = Tensor::zeros(&[px, py, c]);
    for (&(i, j), members) in pillars.coords.iter().zip(&pillars.members) {
        let row = pillar_map.row_mut(&[i, j]);
        for &m in members {
            for (ch, slot) in row.iter_mut().take(f).enumerate() {
                *slot += cloud.features.at(&[m, ch]);
            }
        }
        let n = members.len() as f32;
        for slot in row.iter_mut().take(f) {
            *slot /= n;
        }
        row[f] = (1.0 + n).ln();
    }

    let (bx, by) = (cfg.grid.nx(), cfg.grid.ny());
    let pool = cfg.pool;
    let mut bev = Tensor::zeros(&[bx, by, c]);
    let scale = 1.0 / (pool * pool) as f32;
    for i in 0..bx {
        for j in 0..by {
            let dst = bev.row_mut(&[i, j]);
            for pi in 0..pool {
                for pj in 0..pool {
                    let src = pillar_map.row(&[i * pool + pi, j * pool + pj]);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
    }
    Ok(bev)
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Image BEV features, [X, Y, C_I].
    pub image_bev: Tensor,
    /// Fused radar+image BEV features, [X, Y, C_F].
    pub fused_bev: Tensor,
    /// Predicted occupancy, [X, Y, Z].
    pub occupancy: Tensor,
    pub detections: Vec<Detection>,
    /// Splatting only: [X, Y, Z] coverage mask.
    pub splat_mask: Option<Tensor>,
}

fn at_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(stage))
}

fn to_class_major(t: &Tensor) -> Tensor {
    let (x, y, k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::zeros(&[k, x, y]);
    for xi in 0..x {
        for yi in 0..y {
            let row = t.row(&[xi, yi]);
            for (ki, &v) in row.iter().enumerate() {
                *out.at_mut(&[ki, xi, yi]) = v;
            }
        }
    }
    out
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
    input: &FrameInput,
) -> Result<PipelineOutput> {
    at_stage("ingest", check_features(cfg, &input.features))?;
    for (li, t) in input.features.iter().enumerate() {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("features level {}", li)).at_stage("ingest"));
        }
    }

    let pts = at_stage(
        "normalize",
        normalize(&input.points, &cfg.stats, &cfg.layout.skip_indices()),
    )?;
    let cloud = at_stage(
        "normalize",
        RadarPointCloud::from_channels(&pts, cfg.layout.clone()),
    )?;

    let cloud = crop_to_range(&cloud, &cfg.grid);
    let (cloud, _) = fov_filter(&cloud, &[], &cfg.calib);

    let radar_bev = at_stage("pillarize", radar_bev_features(&cloud, cfg))?;
    at_stage("pillarize", radar_bev.check_finite("radar features"))?;

    let occupancy = at_stage("occupancy_net", occupancy_net(&radar_bev, &weights.occ))?;

    let depth_dists = at_stage(
        "depth_net",
        input
            .features
            .iter()
            .zip(&weights.depth)
            .map(|(f, w)| depth_net(f, w))
            .collect::<Result<Vec<Tensor>>>(),
    )?;

    let centers = voxel_centers(&cfg.grid);
    let (lift_a, lift_b, splat_mask) = at_stage(
        "lifting",
        lift_pair(cfg, weights, &cloud, &input.features, &depth_dists, &centers, &occupancy),
    )?;
    at_stage("lifting", lift_a.check_finite("lifted features"))?;

    let image_bev = at_stage(
        "height_compress",
        height_compress(&lift_a, &lift_b, &weights.compress),
    )?;
    at_stage("height_compress", image_bev.check_finite("image BEV"))?;

    let fused_bev = at_stage("fuse_bev", fuse_bev(&radar_bev, &image_bev, &weights.fuse))?;
    at_stage("fuse_bev", fused_bev.check_finite("fused BEV"))?;

    let heat = to_class_major(&at_stage(
        "decode",
        occupancy_net(&fused_bev, &weights.heatmap),
    )?);
    let regression = at_stage("decode", conv1x1(&fused_bev, &weights.regress))?;
    at_stage("decode", regression.check_finite("regression"))?;
    let class_names = cfg.class_names();
    let mut detections = at_stage(
        "decode",
        decode_detections(
            &heat,
            &regression,
            cfg.top_k,
            &cfg.grid,
            &class_names,
            input.frame,
        ),
    )?;
    detections.retain(|d| d.score >= cfg.score_threshold);

    let detections = at_stage("nms", distance_nms(&detections, &cfg.nms_thresholds()))?;

    Ok(PipelineOutput {
        image_bev,
        fused_bev,
        occupancy,
        detections,
        splat_mask,
    })
}

#[allow(clippy::too_many_arguments)]
fn lift_pair(
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
    cloud: &RadarPointCloud,
    features: &[Tensor],
    depth_dists: &[Tensor],
    centers: &Tensor,
    occupancy: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let _ = weights;
    match cfg.strategy {
        Strategy::Sampling => {
            let f = sample_lift(features, &cfg.strides, centers, &cfg.calib)?;
            Ok((f.clone(), f, None))
        }
        Strategy::DepthSampling => {
            let f = sample_lift(features, &cfg.strides, centers, &cfg.calib)?;
            let ds =
                trilinear_sample_depth(depth_dists, &cfg.strides, centers, &cfg.calib, &cfg.bins)?;
            let fp = depth_weight(&f, &ds)?;
            Ok((fp, f, None))
        }
        Strategy::OccDepthSampling => {
            let f = sample_lift(features, &cfg.strides, centers, &cfg.calib)?;
            let ds =
                trilinear_sample_depth(depth_dists, &cfg.strides, centers, &cfg.calib, &cfg.bins)?;
            let fp = depth_weight(&f, &ds)?;
            let fpp = occupancy_weight(&f, occupancy)?;
            Ok((fp, fpp, None))
        }
        Strategy::CrnOccSampling => {
            let f = sample_lift(features, &cfg.strides, centers, &cfg.calib)?;
            let ds =
                trilinear_sample_depth(depth_dists, &cfg.strides, centers, &cfg.calib, &cfg.bins)?;
            let fp = depth_weight(&f, &ds)?;
            let frustum = cfg.level_shape(0);
            let o_crn = crn_frustum_occupancy(
                cloud,
                &cfg.calib,
                frustum,
                cfg.strides[0],
                centers,
                &cfg.bins,
            )?;
            let fpp = occupancy_weight(&f, &o_crn)?;
            Ok((fp, fpp, None))
        }
        Strategy::Splatting => {
            let (grid, mask) = splat_lift(
                features,
                depth_dists,
                &cfg.strides,
                &cfg.calib,
                &cfg.grid,
                &cfg.bins,
            )?;
            let mut shape = vec![1];
            shape.extend_from_slice(grid.shape());
            let g = grid.reshape(&shape)?;
            Ok((g.clone(), g, Some(mask)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::io::write_archive;

    fn small_config(strategy: &str) -> PipelineConfig {
        let text = crate::config::VOD_PRESET
            .replace("grid.x_max = 51.2", "grid.x_max = 25.6")
            .replace("grid.y_min = -25.6", "grid.y_min = -12.8")
            .replace("grid.y_max = 25.6", "grid.y_max = 12.8")
            .replace("depth.bins = 64", "depth.bins = 16")
            .replace("calib.intrinsic = 320 0 320 0 0 320 240 0 0 0 1 0",
                     "calib.intrinsic = 130 0 80 0 0 130 60 0 0 0 1 0")
            .replace("calib.image_size = 640 480", "calib.image_size = 160 120")
            .replace(
                "strategy = occ-depth-sampling",
                &format!("strategy = {}", strategy),
            );
        parse_config(&text).unwrap()
    }

    fn synthetic_input(cfg: &PipelineConfig, seed: u64) -> FrameInput {
        let scene = crate::synth::generate_scene(&cfg.scene_spec(seed)).unwrap();
        let rng = SplitRng::new(seed ^ 0xF00D);
        let features = (0..cfg.strides.len())
            .map(|li| {
                let (h, w) = cfg.level_shape(li);
                crate::synth::seeded_features(&mut rng.split(li as u64), &[h, w, cfg.image_channels])
            })
            .collect();
        FrameInput {
            frame: 0,
            points: scene.cloud.to_channels(),
            features,
        }
    }

    #[test]
    fn empty_frame_yields_no_detections() {
        let cfg = small_config("occ-depth-sampling");
        let weights = PipelineWeights::seeded(&cfg);
        let input = FrameInput {
            frame: 3,
            points: Tensor::zeros(&[0, 7]),
            features: (0..cfg.strides.len())
                .map(|li| {
                    let (h, w) = cfg.level_shape(li);
                    Tensor::zeros(&[h, w, cfg.image_channels])
                })
                .collect(),
        };
        let out = run_pipeline(&cfg, &weights, &input).unwrap();
        assert!(out.detections.is_empty());
        assert_eq!(out.image_bev.shape(), &[cfg.grid.nx(), cfg.grid.ny(), 8]);
    }

    #[test]
    fn all_strategies_share_output_shape() {
        let mut shapes = Vec::new();
        for strategy in [
            "sampling",
            "splatting",
            "depth-sampling",
            "occ-depth-sampling",
            "crn-occ-sampling",
        ] {
            let cfg = small_config(strategy);
            let weights = PipelineWeights::seeded(&cfg);
            let input = synthetic_input(&cfg, 5);
            let out = run_pipeline(&cfg, &weights, &input).unwrap();
            shapes.push(out.image_bev.shape().to_vec());
            assert_eq!(out.splat_mask.is_some(), strategy == "splatting");
        }
        assert!(shapes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn pipeline_is_reproducible() {
        let cfg = small_config("occ-depth-sampling");
        let weights = PipelineWeights::seeded(&cfg);
        let input = synthetic_input(&cfg, 9);
        let a = run_pipeline(&cfg, &weights, &input).unwrap();
        let b = run_pipeline(&cfg, &weights, &input).unwrap();
        assert_eq!(a.image_bev, b.image_bev);
        assert_eq!(a.fused_bev, b.fused_bev);
        assert_eq!(a.detections, b.detections);
    }

    #[test]
    fn weights_archive_round_trip() {
        let cfg = small_config("occ-depth-sampling");
        let weights = PipelineWeights::seeded(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lxta");
        write_archive(&path, &weights.to_entries()).unwrap();
        let loaded = PipelineWeights::load(&cfg, Some(&path)).unwrap();
        assert_eq!(loaded.occ.weight(), weights.occ.weight());
        assert_eq!(loaded.heatmap.bias(), weights.heatmap.bias());

        let input = synthetic_input(&cfg, 2);
        let a = run_pipeline(&cfg, &weights, &input).unwrap();
        let b = run_pipeline(&cfg, &loaded, &input).unwrap();
        assert_eq!(a.fused_bev, b.fused_bev);
    }

    #[test]
    fn missing_archive_key_is_reported() {
        let cfg = small_config("sampling");
        let weights = PipelineWeights::seeded(&cfg);
        let mut entries = weights.to_entries();
        entries.retain(|(name, _)| name != "fuse.bias");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lxta");
        write_archive(&path, &entries).unwrap();
        assert!(PipelineWeights::load(&cfg, Some(&path)).is_err());
    }

    #[test]
    fn nan_features_exit_through_stage_error() {
        let cfg = small_config("sampling");
        let weights = PipelineWeights::seeded(&cfg);
        let mut input = synthetic_input(&cfg, 4);
        input.features[0].data_mut()[0] = f32::NAN;
        let err = run_pipeline(&cfg, &weights, &input).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("ingest"));
    }

    #[test]
    fn provider_counts_and_means() {
        let cfg = small_config("sampling");
        // two points in one pillar, constant features
        let mut pts = Tensor::zeros(&[2, 7]);
        for (r, y) in [(0usize, -12.76f32), (1, -12.79)] {
            *pts.at_mut(&[r, 0]) = 0.08;
            *pts.at_mut(&[r, 1]) = y;
            *pts.at_mut(&[r, 2]) = 0.0;
            *pts.at_mut(&[r, 3]) = 2.0; // rcs
            *pts.at_mut(&[r, 4]) = 4.0; // v_r
            *pts.at_mut(&[r, 5]) = 6.0; // v_r_comp
        }
        let cloud =
            RadarPointCloud::from_channels(&pts, cfg.layout.clone()).unwrap();
        let bev = radar_bev_features(&cloud, &cfg).unwrap();
        assert_eq!(bev.shape(), &[80, 80, 4]);
        // both points in pillar (0, 0) → BEV cell (0, 0), pooled over 4 pillars
        let cell = bev.row(&[0, 0]);
        let expect = [2.0 / 4.0, 4.0 / 4.0, 6.0 / 4.0, (3.0f32).ln() / 4.0];
        for (got, want) in cell.iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
        }
        assert!(bev.row(&[40, 40]).iter().all(|&v| v == 0.0));
    }
}
