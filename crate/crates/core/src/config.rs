//! Pipeline configuration: a flat `key = value` text format with dotted
//! keys, plus the two shipped presets. Unknown and duplicate keys are
//! rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3x4, Matrix4};

use crate::error::{Error, Result};
use crate::eval::{EvalRegion, IouMode, MatchConfig};
use crate::geometry::{CalibrationSet, CameraIntrinsics, GridSpec, RigidTransform};
use crate::nets::DepthBinSpec;
use crate::pointcloud::{ChannelLayout, NormalizationStats};
use crate::synth::{class_size, ObjectSpec, SceneSpec};

pub const VOD_PRESET: &str = include_str!("../presets/vod.cfg");
pub const TJ4D_PRESET: &str = include_str!("../presets/tj4d.cfg");

/// How image features reach the voxel grid / BEV plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Sampling,
    Splatting,
    DepthSampling,
    OccDepthSampling,
    CrnOccSampling,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "sampling" => Ok(Strategy::Sampling),
            "splatting" => Ok(Strategy::Splatting),
            "depth-sampling" => Ok(Strategy::DepthSampling),
            "occ-depth-sampling" => Ok(Strategy::OccDepthSampling),
            "crn-occ-sampling" => Ok(Strategy::CrnOccSampling),
            other => Err(Error::Config(format!(
                "unknown lifting strategy '{}' (expected sampling, splatting, \
                 depth-sampling, occ-depth-sampling, or crn-occ-sampling)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Sampling => "sampling",
            Strategy::Splatting => "splatting",
            Strategy::DepthSampling => "depth-sampling",
            Strategy::OccDepthSampling => "occ-depth-sampling",
            Strategy::CrnOccSampling => "crn-occ-sampling",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub iou: f64,
    pub nms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub objects: Vec<(String, usize)>,
    pub noise_sigma: f64,
    pub clutter_rate: f64,
    pub points_per_object: usize,
    pub jitter: f64,
    pub margin: f64,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub pillar_grid: GridSpec,
    /// Pillar-to-BEV pooling factor per axis.
    pub pool: usize,
    pub bins: DepthBinSpec,
    pub strides: Vec<f64>,
    pub strategy: Strategy,
    pub weights: Option<PathBuf>,
    pub classes: Vec<ClassSpec>,
    pub image_channels: usize,
    pub bev_channels: usize,
    pub layout: ChannelLayout,
    pub stats: NormalizationStats,
    pub calib: CalibrationSet,
    pub corridor: EvalRegion,
    pub bands: Vec<f64>,
    pub iou_mode: IouMode,
    pub top_k: usize,
    pub min_radius: usize,
    pub score_threshold: f32,
    pub seed: u64,
    pub synth: SynthConfig,
}

// ---------------------------------------------------------------- parsing

struct KeyMap {
    values: BTreeMap<String, String>,
}

impl KeyMap {
    fn parse(text: &str) -> Result<KeyMap> {
        let mut values = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", ln + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("config line {}: empty key", ln + 1)));
            }
            if values
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("duplicate config key '{}'", key)));
            }
        }
        Ok(KeyMap { values })
    }

    fn take(&mut self, key: &str) -> Result<String> {
        self.values
            .remove(key)
            .ok_or_else(|| Error::Config(format!("missing config key '{}'", key)))
    }

    fn take_opt(&mut self, key: &str) -> Option<String> {
        self.values.remove(key).filter(|v| !v.is_empty())
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        let v = self.take(key)?;
        v.parse::<f64>()
            .map_err(|_| Error::Config(format!("config key '{}': '{}' is not a number", key, v)))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.take(key)?;
        v.parse::<usize>().map_err(|_| {
            Error::Config(format!("config key '{}': '{}' is not a count", key, v))
        })
    }

    fn u64(&mut self, key: &str) -> Result<u64> {
        let v = self.take(key)?;
        v.parse::<u64>().map_err(|_| {
            Error::Config(format!("config key '{}': '{}' is not an integer", key, v))
        })
    }

    fn f64_list(&mut self, key: &str) -> Result<Vec<f64>> {
        let v = self.take(key)?;
        v.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Config(format!("config key '{}': '{}' is not a number", key, tok))
                })
            })
            .collect()
    }

    fn words(&mut self, key: &str) -> Result<Vec<String>> {
        Ok(self
            .take(key)?
            .split_whitespace()
            .map(|s| s.to_string())
            .collect())
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.values.keys().next() {
            return Err(Error::Config(format!("unknown config key '{}'", key)));
        }
        Ok(())
    }
}

fn fixed_list(key: &str, vals: &[f64], n: usize) -> Result<()> {
    if vals.len() != n {
        return Err(Error::Config(format!(
            "config key '{}': expected {} values, got {}",
            key,
            n,
            vals.len()
        )));
    }
    Ok(())
}

fn parse_calib(m: &mut KeyMap) -> Result<CalibrationSet> {
    let intr = m.f64_list("calib.intrinsic")?;
    fixed_list("calib.intrinsic", &intr, 12)?;
    let r2c = m.f64_list("calib.radar_to_camera")?;
    fixed_list("calib.radar_to_camera", &r2c, 16)?;
    let size = m.f64_list("calib.image_size")?;
    fixed_list("calib.image_size", &size, 2)?;
    if size[0] < 1.0 || size[1] < 1.0 || size[0].fract() != 0.0 || size[1].fract() != 0.0 {
        return Err(Error::Config(
            "calib.image_size: expected positive integers W H".into(),
        ));
    }
    let camera = CameraIntrinsics::new(
        Matrix3x4::from_row_slice(&intr),
        size[0] as usize,
        size[1] as usize,
    )?;
    let extr = RigidTransform::new(Matrix4::from_row_slice(&r2c))?;
    Ok(CalibrationSet::new(camera, extr))
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut m = KeyMap::parse(text)?;

    let grid = GridSpec::new(
        (m.f64("grid.x_min")?, m.f64("grid.x_max")?),
        (m.f64("grid.y_min")?, m.f64("grid.y_max")?),
        (m.f64("grid.z_min")?, m.f64("grid.z_max")?),
        (
            m.f64("grid.cell_x")?,
            m.f64("grid.cell_y")?,
            m.f64("grid.cell_z")?,
        ),
    )?;
    let pillar_cell = m.f64("pillar.cell")?;
    if !(pillar_cell.is_finite() && pillar_cell > 0.0) {
        return Err(Error::Config("pillar.cell must be positive".into()));
    }
    let pillar_grid = GridSpec::new(
        (grid.x_min, grid.x_max),
        (grid.y_min, grid.y_max),
        (grid.z_min, grid.z_max),
        (pillar_cell, pillar_cell, grid.z_max - grid.z_min),
    )?;
    let pool_f = grid.cell_x / pillar_cell;
    if (pool_f - pool_f.round()).abs() > 1e-6 || pool_f < 1.0 - 1e-9 {
        return Err(Error::Config(format!(
            "grid.cell_x must be an integer multiple of pillar.cell (got ratio {})",
            pool_f
        )));
    }
    if (grid.cell_y / pillar_cell - pool_f).abs() > 1e-6 {
        return Err(Error::Config(
            "BEV cells must be square multiples of the pillar cell".into(),
        ));
    }
    let pool = pool_f.round() as usize;

    let bins = DepthBinSpec::new(m.f64("depth.min")?, m.f64("depth.max")?, m.usize("depth.bins")?)?;

    let strides = m.f64_list("levels.strides")?;
    if strides.is_empty() || strides.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(Error::Config(
            "levels.strides: expected positive numbers".into(),
        ));
    }

    let image_channels = m.usize("image.channels")?;
    let bev_channels = m.usize("bev.channels")?;
    if image_channels == 0 || bev_channels == 0 {
        return Err(Error::Config("channel counts must be at least 1".into()));
    }

    let strategy = Strategy::parse(&m.take("strategy")?)?;
    let weights = m.take_opt("weights").map(PathBuf::from);

    let class_names = m.words("classes")?;
    if class_names.is_empty() {
        return Err(Error::Config("classes: at least one class required".into()));
    }
    let mut classes = Vec::new();
    for name in &class_names {
        let iou = m.f64(&format!("class.{}.iou", name))?;
        let nms = m.f64(&format!("class.{}.nms", name))?;
        if !(0.0 < iou && iou <= 1.0) {
            return Err(Error::Config(format!(
                "class.{}.iou must lie in (0, 1]",
                name
            )));
        }
        if !(nms > 0.0 && nms.is_finite()) {
            return Err(Error::Config(format!(
                "class.{}.nms must be positive",
                name
            )));
        }
        classes.push(ClassSpec {
            name: name.clone(),
            iou,
            nms,
        });
    }

    let layout = ChannelLayout::new(m.words("points.channels")?)
        .map_err(|e| Error::Config(e.to_string()))?;
    let means = m.f64_list("norm.means")?;
    let stds = m.f64_list("norm.stds")?;
    fixed_list("norm.means", &means, layout.channels())?;
    fixed_list("norm.stds", &stds, layout.channels())?;
    let stats = NormalizationStats::new(means, stds)?;

    let calib = parse_calib(&mut m)?;

    let corridor = EvalRegion::DrivingCorridor {
        x_min: m.f64("corridor.x_min")?,
        x_max: m.f64("corridor.x_max")?,
        z_max: m.f64("corridor.z_max")?,
    };

    let bands = m.f64_list("eval.bands")?;
    if bands.len() < 2 || bands.windows(2).any(|w| w[0] >= w[1]) || bands[0] < 0.0 {
        return Err(Error::Config(
            "eval.bands: expected increasing non-negative edges".into(),
        ));
    }
    let iou_mode = match m.take("eval.iou_mode")?.as_str() {
        "bev" => IouMode::Bev,
        "3d" => IouMode::ThreeD,
        other => {
            return Err(Error::Config(format!(
                "eval.iou_mode: expected 'bev' or '3d', got '{}'",
                other
            )))
        }
    };

    let top_k = m.usize("head.top_k")?;
    let min_radius = m.usize("head.min_radius")?;
    let score_threshold = m.f64("head.score_threshold")? as f32;
    if top_k == 0 {
        return Err(Error::Config("head.top_k must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&score_threshold) {
        return Err(Error::Config(
            "head.score_threshold must lie in [0, 1)".into(),
        ));
    }

    let seed = m.u64("seed")?;

    let mut objects = Vec::new();
    for tok in m.words("synth.objects")? {
        let (name, count) = tok.split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "synth.objects: expected name:count, got '{}'",
                tok
            ))
        })?;
        let count = count.parse::<usize>().map_err(|_| {
            Error::Config(format!("synth.objects: bad count in '{}'", tok))
        })?;
        if class_size(name).is_none() {
            return Err(Error::Config(format!(
                "synth.objects: no size model for class '{}'",
                name
            )));
        }
        objects.push((name.to_string(), count));
    }
    let synth = SynthConfig {
        objects,
        noise_sigma: m.f64("synth.noise_sigma")?,
        clutter_rate: m.f64("synth.clutter_rate")?,
        points_per_object: m.usize("synth.points_per_object")?,
        jitter: m.f64("synth.jitter")?,
        margin: m.f64("synth.margin")?,
        frames: m.usize("synth.frames")?,
    };

    m.finish()?;

    Ok(PipelineConfig {
        grid,
        pillar_grid,
        pool,
        bins,
        strides,
        strategy,
        weights,
        classes,
        image_channels,
        bev_channels,
        layout,
        stats,
        calib,
        corridor,
        bands,
        iou_mode,
        top_k,
        min_radius,
        score_threshold,
        seed,
        synth,
    })
}

/// Resolve `spec` as a preset name ("vod", "tj4d") or a config file path.
pub fn load_config(spec: &str) -> Result<PipelineConfig> {
    match spec {
        "vod" => parse_config(VOD_PRESET),
        "tj4d" => parse_config(TJ4D_PRESET),
        path => {
            let text = std::fs::read_to_string(Path::new(path))
                .map_err(|e| Error::Config(format!("cannot read config '{}': {}", path, e)))?;
            parse_config(&text)
        }
    }
}

impl PipelineConfig {
    /// Channels of the radar BEV map: per-pillar feature means plus a
    /// point-count channel.
    pub fn radar_channels(&self) -> usize {
        self.layout.feature_names().len() + 1
    }

    /// Expected feature-map shape at level `li`.
    pub fn level_shape(&self, li: usize) -> (usize, usize) {
        let (w, h) = (
            self.calib.camera.image_width as f64,
            self.calib.camera.image_height as f64,
        );
        let s = self.strides[li];
        ((h / s).ceil() as usize, (w / s).ceil() as usize)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn nms_thresholds(&self) -> Vec<(String, f64)> {
        self.classes
            .iter()
            .map(|c| (c.name.clone(), c.nms))
            .collect()
    }

    pub fn match_config(&self) -> Result<MatchConfig> {
        MatchConfig::new(
            self.iou_mode,
            self.classes
                .iter()
                .map(|c| (c.name.clone(), c.iou))
                .collect(),
        )
    }

    /// Distance-band regions from the configured edges.
    pub fn band_regions(&self) -> Vec<EvalRegion> {
        self.bands
            .windows(2)
            .map(|w| EvalRegion::DistanceBand {
                r_min: w[0],
                r_max: w[1],
            })
            .collect()
    }

    /// Scene generator inputs for one synthetic frame.
    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        let objects = self
            .synth
            .objects
            .iter()
            .map(|(name, count)| ObjectSpec {
                name: name.clone(),
                count: *count,
                size: class_size(name).expect("validated at parse time"),
            })
            .collect();
        SceneSpec {
            seed,
            objects,
            size_jitter: self.synth.jitter,
            noise_sigma: self.synth.noise_sigma,
            clutter_rate: self.synth.clutter_rate,
            points_per_object: self.synth.points_per_object,
            placement_margin: self.synth.margin,
            calib: self.calib.clone(),
            grid: self.grid.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vod_preset_parses_with_published_defaults() {
        let cfg = parse_config(VOD_PRESET).unwrap();
        assert_eq!((cfg.grid.nx(), cfg.grid.ny(), cfg.grid.nz()), (160, 160, 10));
        assert_eq!(cfg.pillar_grid.nx(), 320);
        assert_eq!(cfg.pool, 2);
        assert_eq!(cfg.strategy, Strategy::OccDepthSampling);
        let names = cfg.class_names();
        assert_eq!(names, ["car", "pedestrian", "cyclist"]);
        let ious: Vec<f64> = cfg.classes.iter().map(|c| c.iou).collect();
        assert_eq!(ious, [0.5, 0.25, 0.25]);
        let nms: Vec<f64> = cfg.classes.iter().map(|c| c.nms).collect();
        assert_eq!(nms, [4.0, 0.3, 0.85]);
        match cfg.corridor {
            EvalRegion::DrivingCorridor {
                x_min,
                x_max,
                z_max,
            } => {
                assert_eq!((x_min, x_max, z_max), (-4.0, 4.0, 25.0));
            }
            _ => panic!("corridor region expected"),
        }
        assert_eq!(cfg.radar_channels(), 4);
        assert_eq!(cfg.level_shape(0), (60, 80));
        assert_eq!(cfg.top_k, 1000);
        assert_eq!(cfg.min_radius, 2);
    }

    #[test]
    fn tj4d_preset_adds_truck() {
        let cfg = parse_config(TJ4D_PRESET).unwrap();
        assert_eq!((cfg.grid.nx(), cfg.grid.ny(), cfg.grid.nz()), (216, 248, 12));
        let truck = cfg.classes.iter().find(|c| c.name == "truck").unwrap();
        assert_eq!(truck.iou, 0.5);
        assert_eq!(truck.nms, 12.0);
    }

    #[test]
    fn unknown_duplicate_and_missing_keys_are_rejected() {
        let ok = VOD_PRESET.to_string();
        let unknown = format!("{}\nnot.a.key = 1\n", ok);
        assert!(matches!(
            parse_config(&unknown).unwrap_err(),
            Error::Config(_)
        ));
        let dup = format!("{}\nseed = 9\n", ok);
        assert!(matches!(parse_config(&dup).unwrap_err(), Error::Config(_)));
        let missing = ok.replace("head.top_k = 1000", "");
        assert!(matches!(
            parse_config(&missing).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn bad_values_are_rejected() {
        for (from, to) in [
            ("strategy = occ-depth-sampling", "strategy = magic"),
            ("grid.cell_x = 0.32", "grid.cell_x = 0.3"),
            ("class.car.iou = 0.5", "class.car.iou = 1.5"),
            ("eval.iou_mode = 3d", "eval.iou_mode = 4d"),
            ("head.top_k = 1000", "head.top_k = 0"),
            (
                "synth.objects = car:4 pedestrian:3 cyclist:3",
                "synth.objects = spaceship:1",
            ),
        ] {
            let text = VOD_PRESET.replace(from, to);
            assert!(parse_config(&text).is_err(), "{} should fail", to);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Sampling,
            Strategy::Splatting,
            Strategy::DepthSampling,
            Strategy::OccDepthSampling,
            Strategy::CrnOccSampling,
        ] {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
        }
    }

    #[test]
    fn load_config_accepts_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("own.cfg");
        std::fs::write(&path, VOD_PRESET.replace("seed = 7", "seed = 11")).unwrap();
        let cfg = load_config(path.to_str().unwrap()).unwrap();
        assert_eq!(cfg.seed, 11);
        assert!(load_config("/nonexistent/path.cfg").is_err());
    }
}
