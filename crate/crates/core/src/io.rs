//! File formats: the LXT tensor container, the LXTA named-tensor archive,
//! point-cloud binaries and CSV fixtures, calibration files, and the
//! detection / ground-truth CSV schemas.
//!
//! LXT layout: magic `LXT1`, u32 rank, u32 dims[rank], then little-endian
//! 32-bit reals in row-major order. An LXTA archive is a text index header
//! (`LXTA <count>` then `<name> <offset> <len>` per entry, then one blank
//! line) followed by the concatenated LXT blobs; offsets are relative to
//! the first byte after the blank line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::{Detection, GtBox};
use crate::tensor::Tensor;

pub const LXT_MAGIC: &[u8; 4] = b"LXT1";

pub const DETS_HEADER: &str = "frame,class,score,x,y,z,l,w,h,yaw";
pub const GT_HEADER: &str = "frame,class,x,y,z,l,w,h,yaw,tags";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad number '{}'", what, s)))
}

// ---------------------------------------------------------------- LXT

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(LXT_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let take_u32 = |pos: usize| -> Result<u32> {
        let end = pos + 4;
        if end > bytes.len() {
            return Err(Error::Data("tensor: truncated header".into()));
        }
        Ok(u32::from_le_bytes(bytes[pos..end].try_into().unwrap()))
    };
    if bytes.len() < 8 || &bytes[0..4] != LXT_MAGIC {
        return Err(Error::Data("tensor: bad magic".into()));
    }
    let rank = take_u32(4)? as usize;
    if rank > 16 {
        return Err(Error::Data(format!("tensor: rank {} too large", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for i in 0..rank {
        let d = take_u32(8 + 4 * i)? as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Data("tensor: dims overflow".into()))?;
        shape.push(d);
    }
    let data_start = 8 + 4 * rank;
    let expected = data_start + 4 * len;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "tensor: payload is {} bytes, shape {:?} needs {}",
            bytes.len(),
            shape,
            expected
        )));
    }
    let data = bytes[data_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &tensor_to_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&read_bytes(path)?)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

// ---------------------------------------------------------------- LXTA

fn check_entry_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Data(format!("archive: bad entry name '{}'", name)));
    }
    Ok(())
}

pub fn archive_to_bytes(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut index = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        check_entry_name(name)?;
        let blob = tensor_to_bytes(t);
        index.push((name, body.len(), blob.len()));
        body.extend_from_slice(&blob);
    }
    let mut out = format!("LXTA {}\n", entries.len()).into_bytes();
    for (name, off, len) in index {
        out.extend_from_slice(format!("{} {} {}\n", name, off, len).as_bytes());
    }
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn archive_from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<&str> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(Error::Data("archive: truncated header".into()));
        }
        let line = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| Error::Data("archive: header is not UTF-8".into()))?;
        *pos += 1;
        Ok(line)
    };
    let first = next_line(&mut pos)?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some("LXTA") {
        return Err(Error::Data("archive: bad magic".into()));
    }
    let count: usize = parse_num(
        parts.next().ok_or_else(|| Error::Data("archive: missing entry count".into()))?,
        "archive entry count",
    )?;
    if parts.next().is_some() {
        return Err(Error::Data("archive: malformed first line".into()));
    }
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&mut pos)?;
        let mut f = line.split_whitespace();
        let name = f
            .next()
            .ok_or_else(|| Error::Data("archive: empty index line".into()))?
            .to_string();
        let off: usize = parse_num(
            f.next().ok_or_else(|| Error::Data("archive: missing offset".into()))?,
            "archive offset",
        )?;
        let len: usize = parse_num(
            f.next().ok_or_else(|| Error::Data("archive: missing length".into()))?,
            "archive length",
        )?;
        if f.next().is_some() {
            return Err(Error::Data(format!("archive: malformed index line '{}'", line)));
        }
        index.push((name, off, len));
    }
    let blank = next_line(&mut pos)?;
    if !blank.is_empty() {
        return Err(Error::Data("archive: missing blank line after index".into()));
    }
    let data = &bytes[pos..];
    let mut entries = Vec::with_capacity(count);
    for (name, off, len) in index {
        let end = off
            .checked_add(len)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Data(format!("archive: entry '{}' out of range", name)))?;
        let t = tensor_from_bytes(&data[off..end])
            .map_err(|e| Error::Data(format!("archive entry '{}': {}", name, e)))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn write_archive(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_bytes(path, &archive_to_bytes(entries)?)
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    archive_from_bytes(&read_bytes(path)?)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

/// Archive with lookup by entry name. Entry order is preserved.
#[derive(Debug, Clone)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(entries: Vec<(String, Tensor)>) -> Archive {
        Archive { entries }
    }

    pub fn read(path: &Path) -> Result<Archive> {
        Ok(Archive::new(read_archive(path)?))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("archive: missing entry '{}'", name)))
    }
}

// ---------------------------------------------------------------- point clouds

/// Raw point file: N×C little-endian 32-bit reals, row-major. The channel
/// count comes from the dataset config, not the file.
pub fn read_points_bin(path: &Path, channels: usize) -> Result<Tensor> {
    if channels == 0 {
        return Err(Error::Data("point file: channel count is zero".into()));
    }
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{}: size {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.len() % channels != 0 {
        return Err(Error::Data(format!(
            "{}: {} values do not divide into {} channels",
            path.display(),
            values.len(),
            channels
        )));
    }
    let n = values.len() / channels;
    Tensor::from_vec(&[n, channels], values)
}

pub fn write_points_bin(path: &Path, points: &Tensor) -> Result<()> {
    if points.rank() != 2 {
        return Err(Error::Data("point file: tensor must be N×C".into()));
    }
    let mut out = Vec::with_capacity(4 * points.len());
    for &v in points.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &out)
}

/// CSV fixture: header row of channel names, then one row of reals per point.
pub fn read_points_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty point CSV", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let c = names.len();
    let mut data = Vec::new();
    let mut n = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c {
            return Err(Error::Data(format!(
                "{}: row has {} fields, header has {}",
                path.display(),
                fields.len(),
                c
            )));
        }
        for f in fields {
            data.push(parse_num::<f32>(f, "point CSV")?);
        }
        n += 1;
    }
    Ok((names, Tensor::from_vec(&[n, c], data)?))
}

pub fn write_points_csv(path: &Path, names: &[String], points: &Tensor) -> Result<()> {
    if points.rank() != 2 || points.shape()[1] != names.len() {
        return Err(Error::Data("point CSV: tensor must be N×len(names)".into()));
    }
    let mut out = names.join(",");
    out.push('\n');
    for i in 0..points.shape()[0] {
        let row: Vec<String> = points.row(&[i]).iter().map(|v| format!("{}", v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

// ---------------------------------------------------------------- calibration

/// Raw calibration file contents; geometric validation happens when this is
/// turned into typed camera/transform values.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFile {
    /// 3×4 projection, row-major.
    pub intrinsic: [f64; 12],
    /// 4×4 radar-to-camera rigid transform, row-major.
    pub radar_to_camera: [f64; 16],
    /// Width, height in pixels.
    pub image_size: (usize, usize),
}

pub fn parse_calibration(text: &str) -> Result<CalibrationFile> {
    let mut intrinsic: Option<[f64; 12]> = None;
    let mut radar_to_camera: Option<[f64; 16]> = None;
    let mut image_size: Option<(usize, usize)> = None;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::InvalidCalibration(format!("missing ':' in line '{}'", line)))?;
        let values: Vec<&str> = rest.split_whitespace().collect();
        match key.trim() {
            "intrinsic" => {
                if intrinsic.is_some() {
                    return Err(Error::InvalidCalibration("duplicate key 'intrinsic'".into()));
                }
                if values.len() != 12 {
                    return Err(Error::InvalidCalibration(format!(
                        "intrinsic needs 12 values, found {}",
                        values.len()
                    )));
                }
                let mut m = [0.0; 12];
                for (slot, v) in m.iter_mut().zip(&values) {
                    *slot = parse_num(v, "intrinsic")?;
                }
                intrinsic = Some(m);
            }
            "radar_to_camera" => {
                if radar_to_camera.is_some() {
                    return Err(Error::InvalidCalibration(
                        "duplicate key 'radar_to_camera'".into(),
                    ));
                }
                if values.len() != 16 {
                    return Err(Error::InvalidCalibration(format!(
                        "radar_to_camera needs 16 values, found {}",
                        values.len()
                    )));
                }
                let mut m = [0.0; 16];
                for (slot, v) in m.iter_mut().zip(&values) {
                    *slot = parse_num(v, "radar_to_camera")?;
                }
                radar_to_camera = Some(m);
            }
            "image_size" => {
                if image_size.is_some() {
                    return Err(Error::InvalidCalibration("duplicate key 'image_size'".into()));
                }
                if values.len() != 2 {
                    return Err(Error::InvalidCalibration(format!(
                        "image_size needs 2 values, found {}",
                        values.len()
                    )));
                }
                let w: usize = parse_num(values[0], "image_size")?;
                let h: usize = parse_num(values[1], "image_size")?;
                if w == 0 || h == 0 {
                    return Err(Error::InvalidCalibration("image_size must be positive".into()));
                }
                image_size = Some((w, h));
            }
            other => {
                return Err(Error::InvalidCalibration(format!("unknown key '{}'", other)));
            }
        }
    }
    Ok(CalibrationFile {
        intrinsic: intrinsic
            .ok_or_else(|| Error::InvalidCalibration("missing key 'intrinsic'".into()))?,
        radar_to_camera: radar_to_camera
            .ok_or_else(|| Error::InvalidCalibration("missing key 'radar_to_camera'".into()))?,
        image_size: image_size
            .ok_or_else(|| Error::InvalidCalibration("missing key 'image_size'".into()))?,
    })
}

pub fn read_calibration(path: &Path) -> Result<CalibrationFile> {
    parse_calibration(&read_text(path)?)
        .map_err(|e| Error::InvalidCalibration(format!("{}: {}", path.display(), e)))
}

pub fn calibration_to_string(c: &CalibrationFile) -> String {
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{}", x))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "intrinsic: {}\nradar_to_camera: {}\nimage_size: {} {}\n",
        join(&c.intrinsic),
        join(&c.radar_to_camera),
        c.image_size.0,
        c.image_size.1
    )
}

pub fn write_calibration(path: &Path, c: &CalibrationFile) -> Result<()> {
    write_bytes(path, calibration_to_string(c).as_bytes())
}

// ---------------------------------------------------------------- detections

pub fn dets_to_csv(dets: &[Detection]) -> String {
    let mut out = String::from(DETS_HEADER);
    out.push('\n');
    for d in dets {
        let c = d.bbox.center();
        let s = d.bbox.size();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            d.frame,
            d.class,
            d.score,
            c[0],
            c[1],
            c[2],
            s[0],
            s[1],
            s[2],
            d.bbox.yaw()
        ));
    }
    out
}

fn check_class_name(name: &str) -> Result<String> {
    let name = name.trim();
    if name.is_empty() || name.contains(',') {
        return Err(Error::Data(format!("bad class name '{}'", name)));
    }
    Ok(name.to_string())
}

pub fn dets_from_csv(text: &str) -> Result<Vec<Detection>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DETS_HEADER => {}
        _ => {
            return Err(Error::Data(format!(
                "detection CSV: first line must be '{}'",
                DETS_HEADER
            )))
        }
    }
    let mut dets = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Data(format!(
                "detection CSV line {}: {} fields, expected 10",
                ln + 1,
                f.len()
            )));
        }
        let ctx = format!("detection CSV line {}", ln + 1);
        let bbox = crate::head::Box3D::new(
            [
                parse_num(f[3], &ctx)?,
                parse_num(f[4], &ctx)?,
                parse_num(f[5], &ctx)?,
            ],
            [
                parse_num(f[6], &ctx)?,
                parse_num(f[7], &ctx)?,
                parse_num(f[8], &ctx)?,
            ],
            parse_num(f[9], &ctx)?,
        )?;
        dets.push(Detection {
            frame: parse_num(f[0], &ctx)?,
            class: check_class_name(f[1])?,
            score: parse_num(f[2], &ctx)?,
            bbox,
        });
    }
    Ok(dets)
}

pub fn write_dets_csv(path: &Path, dets: &[Detection]) -> Result<()> {
    write_bytes(path, dets_to_csv(dets).as_bytes())
}

pub fn read_dets_csv(path: &Path) -> Result<Vec<Detection>> {
    dets_from_csv(&read_text(path)?)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

// ---------------------------------------------------------------- ground truth

/// Tags are written as a `;`-joined list in the final column; the column may
/// be absent entirely for fixtures without tags.
pub fn gt_to_csv(boxes: &[GtBox]) -> String {
    let mut out = String::from(GT_HEADER);
    out.push('\n');
    for g in boxes {
        let c = g.bbox.center();
        let s = g.bbox.size();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            g.frame,
            g.class,
            c[0],
            c[1],
            c[2],
            s[0],
            s[1],
            s[2],
            g.bbox.yaw(),
            g.tags.join(";")
        ));
    }
    out
}

pub fn gt_from_csv(text: &str) -> Result<Vec<GtBox>> {
    let mut lines = text.lines().enumerate();
    let with_tags = match lines.next() {
        Some((_, h)) if h.trim() == GT_HEADER => true,
        Some((_, h)) if h.trim() == GT_HEADER.trim_end_matches(",tags") => false,
        _ => {
            return Err(Error::Data(format!(
                "ground-truth CSV: first line must be '{}' (tags column optional)",
                GT_HEADER
            )))
        }
    };
    let want = if with_tags { 10 } else { 9 };
    let mut boxes = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != want {
            return Err(Error::Data(format!(
                "ground-truth CSV line {}: {} fields, expected {}",
                ln + 1,
                f.len(),
                want
            )));
        }
        let ctx = format!("ground-truth CSV line {}", ln + 1);
        let bbox = crate::head::Box3D::new(
            [
                parse_num(f[2], &ctx)?,
                parse_num(f[3], &ctx)?,
                parse_num(f[4], &ctx)?,
            ],
            [
                parse_num(f[5], &ctx)?,
                parse_num(f[6], &ctx)?,
                parse_num(f[7], &ctx)?,
            ],
            parse_num(f[8], &ctx)?,
        )?;
        let tags = if with_tags {
            f[9].split(';')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect()
        } else {
            Vec::new()
        };
        boxes.push(GtBox {
            frame: parse_num(f[0], &ctx)?,
            class: check_class_name(f[1])?,
            bbox,
            tags,
        });
    }
    Ok(boxes)
}

pub fn write_gt_csv(path: &Path, boxes: &[GtBox]) -> Result<()> {
    write_bytes(path, gt_to_csv(boxes).as_bytes())
}

pub fn read_gt_csv(path: &Path) -> Result<Vec<GtBox>> {
    gt_from_csv(&read_text(path)?)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}
