//! View transformation: lifting multi-level image features onto the radar
//! voxel grid by sampling, weighting them with depth and occupancy, and
//! compressing the height axis into BEV features. Also the splatting
//! baseline and the two alternative radar-assistance mechanisms.
//!
//! Voxel feature tensors are [N_lvl, X, Y, Z, C]; sampled depth tensors
//! are [N_lvl, X, Y, Z]. Voxels whose centers project outside the image
//! keep all-zero entries.

use rayon::prelude::*;

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::{CalibrationSet, GridSpec, ImageProjection};
use crate::nets::{conv1x1, Conv1x1Weights, DepthBinSpec};
use crate::pointcloud::RadarPointCloud;
use crate::tensor::Tensor;

// ---------------------------------------------------------------- bilinear

/// A bilinear read with its derivatives: `value` per channel, the scalar
/// d/du and d/dv factors applied channel-wise, and the in-bounds corner
/// taps (row, col, weight) that give the derivative w.r.t. the feature
/// map.
#[derive(Debug, Clone)]
pub struct BilinearSample {
    pub value: Vec<f32>,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub taps: Vec<(usize, usize, f64)>,
}

fn corner_weights(u: f64, v: f64) -> ([i64; 2], [i64; 2], [f64; 2], [f64; 2]) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    (
        [x0 as i64, x0 as i64 + 1],
        [y0 as i64, y0 as i64 + 1],
        [1.0 - fx, fx],
        [1.0 - fy, fy],
    )
}

fn fetch(featmap: &Tensor, row: i64, col: i64, ch: usize) -> f64 {
    let (h, w) = (featmap.shape()[0] as i64, featmap.shape()[1] as i64);
    if row < 0 || row >= h || col < 0 || col >= w {
        0.0
    } else {
        featmap.at(&[row as usize, col as usize, ch]) as f64
    }
}

fn bilinear_into(featmap: &Tensor, u: f64, v: f64, out: &mut [f32]) {
    let (xs, ys, wx, wy) = corner_weights(u, v);
    for (ch, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for iy in 0..2 {
            for ix in 0..2 {
                let w = wx[ix] * wy[iy];
                if w != 0.0 {
                    acc += w * fetch(featmap, ys[iy], xs[ix], ch);
                }
            }
        }
        *slot = acc as f32;
    }
}

/// Bilinear interpolation of a [H, W, C] map at real pixel (u, v) with
/// zero padding outside the pixel-center lattice.
pub fn bilinear_sample(featmap: &Tensor, u: f64, v: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; featmap.shape()[2]];
    bilinear_into(featmap, u, v, &mut out);
    out
}

/// As `bilinear_sample`, also returning analytic derivatives.
pub fn bilinear_sample_grad(featmap: &Tensor, u: f64, v: f64) -> BilinearSample {
    let (h, w, c) = (
        featmap.shape()[0] as i64,
        featmap.shape()[1] as i64,
        featmap.shape()[2],
    );
    let (xs, ys, wx, wy) = corner_weights(u, v);
    let mut value = vec![0.0f32; c];
    let mut grad_u = vec![0.0f64; c];
    let mut grad_v = vec![0.0f64; c];
    for ch in 0..c {
        let f: Vec<f64> = (0..2)
            .flat_map(|iy| (0..2).map(move |ix| (iy, ix)))
            .map(|(iy, ix)| fetch(featmap, ys[iy], xs[ix], ch))
            .collect();
        // f = [f00, f01, f10, f11] with rows y0,y1 and cols x0,x1
        value[ch] = (wx[0] * wy[0] * f[0]
            + wx[1] * wy[0] * f[1]
            + wx[0] * wy[1] * f[2]
            + wx[1] * wy[1] * f[3]) as f32;
        grad_u[ch] = wy[0] * (f[1] - f[0]) + wy[1] * (f[3] - f[2]);
        grad_v[ch] = wx[0] * (f[2] - f[0]) + wx[1] * (f[3] - f[1]);
    }
    let mut taps = Vec::with_capacity(4);
    for iy in 0..2 {
        for ix in 0..2 {
            if ys[iy] >= 0 && ys[iy] < h && xs[ix] >= 0 && xs[ix] < w {
                taps.push((ys[iy] as usize, xs[ix] as usize, wx[ix] * wy[iy]));
            }
        }
    }
    BilinearSample {
        value,
        grad_u,
        grad_v,
        taps,
    }
}

// ---------------------------------------------------------------- trilinear

/// Trilinear interpolation of a rank-3 grid at real coordinates
/// (a0, a1, a2) along its axes, zero-padded outside the node lattice.
pub fn trilinear_sample(grid: &Tensor, a0: f64, a1: f64, a2: f64) -> f64 {
    trilinear_sample_grad(grid, a0, a1, a2).0
}

/// Trilinear value and its gradient w.r.t. the three coordinates.
pub fn trilinear_sample_grad(grid: &Tensor, a0: f64, a1: f64, a2: f64) -> (f64, [f64; 3]) {
    let dims = [
        grid.shape()[0] as i64,
        grid.shape()[1] as i64,
        grid.shape()[2] as i64,
    ];
    let q = [a0, a1, a2];
    let mut idx = [[0i64; 2]; 3];
    let mut wgt = [[0.0f64; 2]; 3];
    for k in 0..3 {
        let lo = q[k].floor();
        idx[k] = [lo as i64, lo as i64 + 1];
        wgt[k] = [1.0 - (q[k] - lo), q[k] - lo];
    }
    let fetch3 = |i: i64, j: i64, k: i64| -> f64 {
        if i < 0 || i >= dims[0] || j < 0 || j >= dims[1] || k < 0 || k >= dims[2] {
            0.0
        } else {
            grid.at(&[i as usize, j as usize, k as usize]) as f64
        }
    };
    let mut value = 0.0;
    let mut grad = [0.0f64; 3];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let f = fetch3(idx[0][i], idx[1][j], idx[2][k]);
                if f == 0.0 {
                    continue;
                }
                value += wgt[0][i] * wgt[1][j] * wgt[2][k] * f;
                let s = |b: usize| if b == 0 { -1.0 } else { 1.0 };
                grad[0] += s(i) * wgt[1][j] * wgt[2][k] * f;
                grad[1] += wgt[0][i] * s(j) * wgt[2][k] * f;
                grad[2] += wgt[0][i] * wgt[1][j] * s(k) * f;
            }
        }
    }
    (value, grad)
}

// ---------------------------------------------------------------- lifting

fn check_levels(maps: &[Tensor], strides: &[f64], last_dim: Option<usize>) -> Result<usize> {
    if maps.is_empty() {
        return Err(Error::Config("lifting: no feature levels given".into()));
    }
    if maps.len() != strides.len() {
        return Err(shape_mismatch(
            "lifting levels",
            format!("{} maps", strides.len()),
            format!("{} maps", maps.len()),
        ));
    }
    if strides.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Config("lifting: strides must be positive".into()));
    }
    let mut c = last_dim.unwrap_or(0);
    for m in maps {
        if m.rank() != 3 {
            return Err(shape_mismatch(
                "level map",
                "rank 3",
                format!("{:?}", m.shape()),
            ));
        }
        if c == 0 {
            c = m.shape()[2];
        } else if m.shape()[2] != c {
            return Err(shape_mismatch(
                "level channels",
                c.to_string(),
                m.shape()[2].to_string(),
            ));
        }
    }
    Ok(c)
}

fn grid_dims(centers: &Tensor) -> Result<(usize, usize, usize)> {
    if centers.rank() != 4 || centers.shape()[3] != 3 {
        return Err(shape_mismatch(
            "voxel centers",
            "X×Y×Z×3",
            format!("{:?}", centers.shape()),
        ));
    }
    Ok((centers.shape()[0], centers.shape()[1], centers.shape()[2]))
}

fn project_centers(centers: &Tensor, calib: &CalibrationSet) -> Vec<ImageProjection> {
    centers
        .data()
        .par_chunks(3)
        .map(|p| {
            calib.project_point(&nalgebra::Point3::new(
                p[0] as f64,
                p[1] as f64,
                p[2] as f64,
            ))
        })
        .collect()
}

/// Lift image features onto the voxel grid: project every voxel center,
/// and where it lands in view, bilinearly sample each level at the
/// stride-scaled pixel. Out-of-view voxels stay zero.
pub fn sample_lift(
    featmaps: &[Tensor],
    strides: &[f64],
    centers: &Tensor,
    calib: &CalibrationSet,
) -> Result<Tensor> {
    let c = check_levels(featmaps, strides, None)?;
    let (nx, ny, nz) = grid_dims(centers)?;
    let projections = project_centers(centers, calib);
    let vox = nx * ny * nz;
    let mut out = Tensor::zeros(&[featmaps.len(), nx, ny, nz, c]);
    for (li, (fm, stride)) in featmaps.iter().zip(strides).enumerate() {
        let level = &mut out.data_mut()[li * vox * c..(li + 1) * vox * c];
        level
            .par_chunks_mut(c)
            .zip(projections.par_iter())
            .for_each(|(chunk, p)| {
                if p.valid {
                    bilinear_into(fm, p.u / stride, p.v / stride, chunk);
                }
            });
    }
    Ok(out)
}

/// Sample per-voxel depth probabilities from the per-level frustum
/// distributions: voxel centers map to continuous frustum coordinates
/// (v/stride, u/stride, bin coordinate) and read the 2×2×2 neighborhood.
pub fn trilinear_sample_depth(
    depth_maps: &[Tensor],
    strides: &[f64],
    centers: &Tensor,
    calib: &CalibrationSet,
    bins: &DepthBinSpec,
) -> Result<Tensor> {
    check_levels(depth_maps, strides, Some(bins.bins))?;
    let (nx, ny, nz) = grid_dims(centers)?;
    let projections = project_centers(centers, calib);
    let vox = nx * ny * nz;
    let mut out = Tensor::zeros(&[depth_maps.len(), nx, ny, nz]);
    for (li, (dm, stride)) in depth_maps.iter().zip(strides).enumerate() {
        let level = &mut out.data_mut()[li * vox..(li + 1) * vox];
        level
            .par_iter_mut()
            .zip(projections.par_iter())
            .for_each(|(slot, p)| {
                if p.valid {
                    let b = bins.depth_to_coord(p.d);
                    *slot = trilinear_sample(dm, p.v / stride, p.u / stride, b) as f32;
                }
            });
    }
    Ok(out)
}

/// F'[l,x,y,z,c] = F[l,x,y,z,c] · Ds[l,x,y,z].
pub fn depth_weight(f: &Tensor, ds: &Tensor) -> Result<Tensor> {
    if f.rank() != 5 || ds.rank() != 4 || f.shape()[..4] != ds.shape()[..4] {
        return Err(shape_mismatch(
            "depth weighting",
            format!("{:?} × channels", ds.shape()),
            format!("{:?}", f.shape()),
        ));
    }
    let c = f.shape()[4];
    let mut out = f.clone();
    out.data_mut()
        .par_chunks_mut(c)
        .zip(ds.data().par_iter())
        .for_each(|(chunk, &w)| {
            for v in chunk {
                *v *= w;
            }
        });
    Ok(out)
}

/// F''[l,x,y,z,c] = F[l,x,y,z,c] · O[x,y,z], broadcast over levels.
pub fn occupancy_weight(f: &Tensor, occ: &Tensor) -> Result<Tensor> {
    if f.rank() != 5 || occ.rank() != 3 || f.shape()[1..4] != occ.shape()[..3] {
        return Err(shape_mismatch(
            "occupancy weighting",
            format!("levels × {:?} × channels", occ.shape()),
            format!("{:?}", f.shape()),
        ));
    }
    let c = f.shape()[4];
    let vox = occ.len();
    let mut out = f.clone();
    for li in 0..f.shape()[0] {
        let level = &mut out.data_mut()[li * vox * c..(li + 1) * vox * c];
        level
            .par_chunks_mut(c)
            .zip(occ.data().par_iter())
            .for_each(|(chunk, &w)| {
                for v in chunk {
                    *v *= w;
                }
            });
    }
    Ok(out)
}

/// Collapse two lifted tensors into BEV: concatenate their channels, sum
/// over levels, flatten the height axis, and apply a per-cell linear map.
/// `w` must take Z·2C inputs.
pub fn height_compress(fp: &Tensor, fpp: &Tensor, w: &Conv1x1Weights) -> Result<Tensor> {
    if fp.rank() != 5 {
        return Err(shape_mismatch(
            "compress input",
            "rank 5",
            format!("{:?}", fp.shape()),
        ));
    }
    if fp.shape() != fpp.shape() {
        return Err(shape_mismatch(
            "compress pair",
            format!("{:?}", fp.shape()),
            format!("{:?}", fpp.shape()),
        ));
    }
    let (lvls, nx, ny, nz, c) = (
        fp.shape()[0],
        fp.shape()[1],
        fp.shape()[2],
        fp.shape()[3],
        fp.shape()[4],
    );
    let stacked_c = nz * 2 * c;
    let mut stacked = Tensor::zeros(&[nx, ny, stacked_c]);
    let block = nz * c;
    for li in 0..lvls {
        let base = li * nx * ny * block;
        let fp_level = &fp.data()[base..base + nx * ny * block];
        let fpp_level = &fpp.data()[base..base + nx * ny * block];
        stacked
            .data_mut()
            .par_chunks_mut(stacked_c)
            .enumerate()
            .for_each(|(cell, chunk)| {
                let a = &fp_level[cell * block..(cell + 1) * block];
                let b = &fpp_level[cell * block..(cell + 1) * block];
                for z in 0..nz {
                    for ch in 0..c {
                        chunk[z * 2 * c + ch] += a[z * c + ch];
                        chunk[z * 2 * c + c + ch] += b[z * c + ch];
                    }
                }
            });
    }
    conv1x1(&stacked, w)
}

// ---------------------------------------------------------------- splatting

/// Splat every pixel's depth distribution into the grid: each (pixel, bin)
/// pair becomes a point at the bin-center depth carrying feature × bin
/// probability, summed per voxel. The second tensor is the [X, Y, Z]
/// coverage mask: 1 where at least one frustum point landed, whatever its
/// probability. Accumulation order is fixed by sorting, so the result does
/// not depend on thread count.
pub fn splat_lift(
    featmaps: &[Tensor],
    depth_maps: &[Tensor],
    strides: &[f64],
    calib: &CalibrationSet,
    spec: &GridSpec,
    bins: &DepthBinSpec,
) -> Result<(Tensor, Tensor)> {
    let c = check_levels(featmaps, strides, None)?;
    check_levels(depth_maps, strides, Some(bins.bins))?;
    for (fm, dm) in featmaps.iter().zip(depth_maps) {
        if fm.shape()[..2] != dm.shape()[..2] {
            return Err(shape_mismatch(
                "splat level pair",
                format!("{:?}", &fm.shape()[..2]),
                format!("{:?}", &dm.shape()[..2]),
            ));
        }
    }
    let (nx, ny, nz) = (spec.nx(), spec.ny(), spec.nz());

    // (voxel, level, row, col, bin) uniquely orders every contribution
    let mut contributions: Vec<(usize, u32, u32, u32, u32)> = Vec::new();
    for (li, (dm, stride)) in depth_maps.iter().zip(strides).enumerate() {
        let (h, w) = (dm.shape()[0], dm.shape()[1]);
        let mut per_row: Vec<Vec<(usize, u32, u32, u32, u32)>> = (0..h)
            .into_par_iter()
            .map(|row| {
                let mut acc = Vec::new();
                for col in 0..w {
                    let u = col as f64 * stride;
                    let v = row as f64 * stride;
                    for k in 0..bins.bins {
                        let d = bins.bin_center(k);
                        let p = calib
                            .back_project(u, v, d)
                            .expect("bin centers are positive depths");
                        if let Some((i, j, kk)) = spec.cell_of(p.x, p.y, p.z) {
                            let voxel = (i * ny + j) * nz + kk;
                            acc.push((voxel, li as u32, row as u32, col as u32, k as u32));
                        }
                    }
                }
                acc
            })
            .collect();
        for row in per_row.drain(..) {
            contributions.extend(row);
        }
    }
    contributions.sort_unstable();

    let mut grid = Tensor::zeros(&[nx, ny, nz, c]);
    let mut mask = Tensor::zeros(&[nx, ny, nz]);
    let out = grid.data_mut();
    for (voxel, li, row, col, k) in contributions {
        mask.data_mut()[voxel] = 1.0;
        let prob = depth_maps[li as usize].at(&[row as usize, col as usize, k as usize]);
        if prob != 0.0 {
            let feat = featmaps[li as usize].row(&[row as usize, col as usize]);
            let dst = &mut out[voxel * c..(voxel + 1) * c];
            for (slot, &fv) in dst.iter_mut().zip(feat) {
                *slot += prob * fv;
            }
        }
    }
    Ok((grid, mask))
}

// ---------------------------------------------------------------- ablations

/// Binary occupancy measured in the image frustum: points are binned into
/// an (H', W', D) grid, which is then read back trilinearly at the voxel
/// centers' frustum coordinates.
pub fn crn_frustum_occupancy(
    cloud: &RadarPointCloud,
    calib: &CalibrationSet,
    frustum: (usize, usize),
    stride: f64,
    centers: &Tensor,
    bins: &DepthBinSpec,
) -> Result<Tensor> {
    if frustum.0 == 0 || frustum.1 == 0 {
        return Err(Error::Config("frustum grid must be non-empty".into()));
    }
    if !(stride.is_finite() && stride > 0.0) {
        return Err(Error::Config("frustum stride must be positive".into()));
    }
    let (nx, ny, nz) = grid_dims(centers)?;
    let mut frustum_grid = Tensor::zeros(&[frustum.0, frustum.1, bins.bins]);
    for p in &cloud.positions {
        let proj = calib.project_point(&nalgebra::Point3::new(p[0], p[1], p[2]));
        if !proj.valid {
            continue;
        }
        let row = (proj.v / stride).floor() as i64;
        let col = (proj.u / stride).floor() as i64;
        if row < 0 || row >= frustum.0 as i64 || col < 0 || col >= frustum.1 as i64 {
            continue;
        }
        if let Some(k) = bins.bin_of(proj.d) {
            *frustum_grid.at_mut(&[row as usize, col as usize, k]) = 1.0;
        }
    }
    let projections = project_centers(centers, calib);
    let mut out = Tensor::zeros(&[nx, ny, nz]);
    out.data_mut()
        .par_iter_mut()
        .zip(projections.par_iter())
        .for_each(|(slot, p)| {
            if p.valid {
                let b = bins.depth_to_coord(p.d);
                *slot = trilinear_sample(&frustum_grid, p.v / stride, p.u / stride, b) as f32;
            }
        });
    Ok(out)
}

/// Sparse ground-truth depth image from radar returns: each point is
/// assigned to its nearest pixel, collisions average, untouched pixels
/// stay 0.
pub fn radar_depth_map(
    cloud: &RadarPointCloud,
    calib: &CalibrationSet,
    size: (usize, usize),
) -> Tensor {
    let (h, w) = size;
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for p in &cloud.positions {
        let proj = calib.project_point(&nalgebra::Point3::new(p[0], p[1], p[2]));
        if !proj.valid {
            continue;
        }
        let row = proj.v.round() as i64;
        let col = proj.u.round() as i64;
        if row < 0 || row >= h as i64 || col < 0 || col >= w as i64 {
            continue;
        }
        sum[row as usize * w + col as usize] += proj.d;
        count[row as usize * w + col as usize] += 1;
    }
    let mut out = Tensor::zeros(&[h, w]);
    for (i, slot) in out.data_mut().iter_mut().enumerate() {
        if count[i] > 0 {
            *slot = (sum[i] / count[i] as f64) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::voxel_centers;
    use crate::synth::{canonical_calibration, SplitRng};
    use approx::assert_relative_eq;

    fn random_map(rng: &mut SplitRng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f32;
        }
        t
    }

    #[test]
    fn bilinear_hits_nodes_and_pads() {
        let m = Tensor::from_vec(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 1.0, 0.0), vec![1.0]);
        assert_eq!(bilinear_sample(&m, 0.5, 0.5), vec![1.5]);
        assert_eq!(bilinear_sample(&m, -5.0, -5.0), vec![0.0]);
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let mut rng = SplitRng::new(41);
        let m = random_map(&mut rng, &[7, 9, 3]);
        // f64 evaluation so the finite difference is not drowned by output
        // rounding
        let bl64 = |map: &Tensor, u: f64, v: f64, ch: usize| -> f64 {
            let (xs, ys, wx, wy) = corner_weights(u, v);
            let mut acc = 0.0;
            for iy in 0..2 {
                for ix in 0..2 {
                    acc += wx[ix] * wy[iy] * fetch(map, ys[iy], xs[ix], ch);
                }
            }
            acc
        };
        let eps = 1e-3;
        for _ in 0..100 {
            // keep away from lattice lines where the kink makes FD invalid
            let u = rng.below(10) as f64 + rng.uniform(0.2, 0.8) - 1.0;
            let v = rng.below(8) as f64 + rng.uniform(0.2, 0.8) - 1.0;
            let g = bilinear_sample_grad(&m, u, v);
            for ch in 0..3 {
                assert_relative_eq!(
                    g.value[ch] as f64,
                    bl64(&m, u, v, ch),
                    max_relative = 1e-6,
                    epsilon = 1e-6
                );
                let fd_u = (bl64(&m, u + eps, v, ch) - bl64(&m, u - eps, v, ch)) / (2.0 * eps);
                let fd_v = (bl64(&m, u, v + eps, ch) - bl64(&m, u, v - eps, ch)) / (2.0 * eps);
                assert_relative_eq!(g.grad_u[ch], fd_u, max_relative = 1e-4, epsilon = 1e-9);
                assert_relative_eq!(g.grad_v[ch], fd_v, max_relative = 1e-4, epsilon = 1e-9);
            }
            // taps are the derivative w.r.t. map entries
            for &(r, c, wt) in &g.taps {
                let mut bumped = m.clone();
                *bumped.at_mut(&[r, c, 0]) += eps as f32;
                let fd = (bl64(&bumped, u, v, 0) - bl64(&m, u, v, 0)) / eps;
                assert_relative_eq!(wt, fd, max_relative = 1e-3, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn trilinear_gradients_match_finite_differences() {
        let mut rng = SplitRng::new(42);
        let g = random_map(&mut rng, &[5, 6, 7]);
        let eps = 1e-3;
        for _ in 0..100 {
            let a = rng.below(6) as f64 + rng.uniform(0.2, 0.8) - 1.0;
            let b = rng.below(7) as f64 + rng.uniform(0.2, 0.8) - 1.0;
            let c = rng.below(8) as f64 + rng.uniform(0.2, 0.8) - 1.0;
            let (val, grad) = trilinear_sample_grad(&g, a, b, c);
            let fd = [
                (trilinear_sample(&g, a + eps, b, c) - trilinear_sample(&g, a - eps, b, c))
                    / (2.0 * eps),
                (trilinear_sample(&g, a, b + eps, c) - trilinear_sample(&g, a, b - eps, c))
                    / (2.0 * eps),
                (trilinear_sample(&g, a, b, c + eps) - trilinear_sample(&g, a, b, c - eps))
                    / (2.0 * eps),
            ];
            assert!(val.is_finite());
            for k in 0..3 {
                assert_relative_eq!(grad[k], fd[k], max_relative = 1e-4, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn trilinear_node_value() {
        let mut g = Tensor::zeros(&[3, 3, 3]);
        *g.at_mut(&[1, 2, 0]) = 0.7;
        assert_relative_eq!(trilinear_sample(&g, 1.0, 2.0, 0.0), 0.7, max_relative = 1e-6);
        assert_relative_eq!(trilinear_sample(&g, -9.0, 0.0, 0.0), 0.0);
    }

    fn test_grid() -> GridSpec {
        GridSpec::new((0.0, 12.8), (-6.4, 6.4), (-2.0, 2.0), (1.6, 1.6, 1.0)).unwrap()
    }

    #[test]
    fn sample_lift_constant_map() {
        let calib = canonical_calibration(64, 48, 40.0);
        let grid = test_grid();
        let centers = voxel_centers(&grid);
        let fm = Tensor::full(&[12, 16, 2], 3.25);
        let out = sample_lift(&[fm], &[4.0], &centers, &calib).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 4, 2]);
        let mut in_view = 0;
        for (p, chunk) in project_centers(&centers, &calib)
            .iter()
            .zip(out.data().chunks(2))
        {
            if p.valid {
                in_view += 1;
                // stride-4 sampling may step outside the level map edge
                let inside =
                    p.u / 4.0 <= 15.0 && p.v / 4.0 <= 11.0;
                if inside {
                    assert_eq!(chunk, &[3.25, 3.25]);
                }
            } else {
                assert_eq!(chunk, &[0.0, 0.0]);
            }
        }
        assert!(in_view > 0);
    }

    #[test]
    fn sample_lift_matches_scalar_oracle() {
        let mut rng = SplitRng::new(7);
        let calib = canonical_calibration(64, 48, 40.0);
        let grid = test_grid();
        let centers = voxel_centers(&grid);
        let maps = vec![
            random_map(&mut rng, &[24, 32, 4]),
            random_map(&mut rng, &[12, 16, 4]),
        ];
        let strides = [2.0, 4.0];
        let out = sample_lift(&maps, &strides, &centers, &calib).unwrap();
        let vox = 8 * 8 * 4;
        for (vi, p) in project_centers(&centers, &calib).iter().enumerate() {
            for (li, (map, s)) in maps.iter().zip(&strides).enumerate() {
                for ch in 0..4 {
                    let got = out.data()[li * vox * 4 + vi * 4 + ch];
                    let want = if p.valid {
                        // direct 4-corner expansion, independent of bilinear_into
                        let (u, v) = (p.u / s, p.v / s);
                        let (x0, y0) = (u.floor(), v.floor());
                        let (fx, fy) = (u - x0, v - y0);
                        let mut acc = 0.0;
                        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                                acc += wx * wy * fetch(map, (y0 + dy) as i64, (x0 + dx) as i64, ch);
                            }
                        }
                        acc as f32
                    } else {
                        0.0
                    };
                    assert_relative_eq!(got, want, max_relative = 1e-6, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn depth_sampling_uniform_distribution() {
        let calib = canonical_calibration(64, 48, 40.0);
        let grid = test_grid();
        let centers = voxel_centers(&grid);
        let bins = DepthBinSpec::new(0.5, 16.5, 16).unwrap();
        let dm = Tensor::full(&[12, 16, 16], 1.0 / 16.0);
        let out = trilinear_sample_depth(&[dm], &[4.0], &centers, &calib, &bins).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 4]);
        for (p, &v) in project_centers(&centers, &calib).iter().zip(out.data()) {
            if p.valid {
                let (bu, bv, bb) = (p.u / 4.0, p.v / 4.0, bins.depth_to_coord(p.d));
                let interior = bu <= 15.0 && bv <= 11.0 && (0.0..=15.0).contains(&bb);
                if interior {
                    assert_relative_eq!(v, 1.0 / 16.0, max_relative = 1e-6);
                }
                assert!(v <= 1.0 / 16.0 + 1e-7);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn depth_sampling_node_exact() {
        let calib = canonical_calibration(64, 48, 40.0);
        let bins = DepthBinSpec::new(0.5, 16.5, 16).unwrap();
        let stride = 4.0;
        // a point whose frustum coordinates are exactly the node (3, 5, 7)
        let p = calib
            .back_project(5.0 * stride, 3.0 * stride, bins.bin_center(7))
            .unwrap();
        let centers =
            Tensor::from_vec(&[1, 1, 1, 3], vec![p.x as f32, p.y as f32, p.z as f32]).unwrap();
        let mut dm = Tensor::zeros(&[12, 16, 16]);
        *dm.at_mut(&[3, 5, 7]) = 0.42;
        let out = trilinear_sample_depth(&[dm], &[stride], &centers, &calib, &bins).unwrap();
        assert_relative_eq!(out.at(&[0, 0, 0, 0]), 0.42, max_relative = 1e-5);
    }

    #[test]
    fn weighting_identity_zero_and_bounds() {
        let mut rng = SplitRng::new(3);
        let f = random_map(&mut rng, &[2, 3, 3, 2, 4]);
        let ones = Tensor::full(&[2, 3, 3, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 3, 3, 2]);
        assert_eq!(depth_weight(&f, &ones).unwrap(), f);
        assert!(depth_weight(&f, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let occ_ones = Tensor::full(&[3, 3, 2], 1.0);
        let occ_zeros = Tensor::zeros(&[3, 3, 2]);
        assert_eq!(occupancy_weight(&f, &occ_ones).unwrap(), f);
        assert!(occupancy_weight(&f, &occ_zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        // weights in [0,1] can only shrink magnitudes
        let mut ds = Tensor::zeros(&[2, 3, 3, 2]);
        for v in ds.data_mut() {
            *v = rng.uniform(0.0, 1.0) as f32;
        }
        let fp = depth_weight(&f, &ds).unwrap();
        for (a, b) in fp.data().iter().zip(f.data()) {
            assert!(a.abs() <= b.abs() + 1e-9);
        }

        assert!(depth_weight(&f, &Tensor::zeros(&[2, 3, 3, 1])).is_err());
        assert!(occupancy_weight(&f, &Tensor::zeros(&[3, 3, 1])).is_err());
    }

    #[test]
    fn weighting_is_bilinear() {
        let mut rng = SplitRng::new(5);
        let f = random_map(&mut rng, &[1, 2, 2, 2, 3]);
        let g = random_map(&mut rng, &[1, 2, 2, 2, 3]);
        let ds = random_map(&mut rng, &[1, 2, 2, 2]);
        let mut sum = f.clone();
        for (s, &v) in sum.data_mut().iter_mut().zip(g.data()) {
            *s += v;
        }
        let lhs = depth_weight(&sum, &ds).unwrap();
        let (a, b) = (depth_weight(&f, &ds).unwrap(), depth_weight(&g, &ds).unwrap());
        for ((l, x), y) in lhs.data().iter().zip(a.data()).zip(b.data()) {
            assert_relative_eq!(*l, x + y, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn compress_averages_with_uniform_weights() {
        let mut rng = SplitRng::new(13);
        let fp = random_map(&mut rng, &[1, 2, 2, 3, 2]);
        let fpp = random_map(&mut rng, &[1, 2, 2, 3, 2]);
        let c_in = 3 * 2 * 2;
        let w = Conv1x1Weights::new(
            Tensor::full(&[1, c_in], 1.0 / c_in as f32),
            vec![0.0],
        )
        .unwrap();
        let out = height_compress(&fp, &fpp, &w).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        for x in 0..2 {
            for y in 0..2 {
                let mut mean = 0.0f64;
                for z in 0..3 {
                    for ch in 0..2 {
                        mean += fp.at(&[0, x, y, z, ch]) as f64;
                        mean += fpp.at(&[0, x, y, z, ch]) as f64;
                    }
                }
                mean /= c_in as f64;
                assert_relative_eq!(out.at(&[x, y, 0]) as f64, mean, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn compress_block_projection_ignores_second_input() {
        let mut rng = SplitRng::new(14);
        let fp = random_map(&mut rng, &[2, 2, 2, 2, 3]);
        let fpp = random_map(&mut rng, &[2, 2, 2, 2, 3]);
        let (nz, c) = (2, 3);
        // rows read only the F' half of each z slot
        let mut wt = Tensor::zeros(&[c, nz * 2 * c]);
        for o in 0..c {
            for z in 0..nz {
                *wt.at_mut(&[o, z * 2 * c + o]) = 1.0;
            }
        }
        let w = Conv1x1Weights::new(wt, vec![0.0; c]).unwrap();
        let a = height_compress(&fp, &fpp, &w).unwrap();
        let b = height_compress(&fp, &Tensor::zeros(&[2, 2, 2, 2, 3]), &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splat_single_ray() {
        let calib = canonical_calibration(64, 48, 40.0);
        let grid = test_grid();
        let bins = DepthBinSpec::new(0.5, 8.5, 8).unwrap();
        let stride = 16.0;
        let fm = Tensor::full(&[3, 4, 2], 2.0);
        let mut dm = Tensor::zeros(&[3, 4, 8]);
        *dm.at_mut(&[1, 2, 5]) = 1.0;
        let (out, mask) = splat_lift(&[fm], &[dm], &[stride], &calib, &grid, &bins).unwrap();
        assert_eq!(out.shape(), &[8, 8, 4, 2]);
        assert_eq!(mask.shape(), &[8, 8, 4]);
        let p = calib
            .back_project(2.0 * stride, 1.0 * stride, bins.bin_center(5))
            .unwrap();
        let (i, j, k) = grid.cell_of(p.x, p.y, p.z).unwrap();
        let nonzero: Vec<usize> = out
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        let base = ((i * 8 + j) * 4 + k) * 2;
        assert_eq!(nonzero, vec![base, base + 1]);
        assert_eq!(out.data()[base], 2.0);
        assert_eq!(mask.at(&[i, j, k]), 1.0);
    }

    #[test]
    fn splat_zero_probabilities_give_zero_grid() {
        let calib = canonical_calibration(64, 48, 40.0);
        let grid = test_grid();
        let bins = DepthBinSpec::new(0.5, 8.5, 8).unwrap();
        let fm = Tensor::full(&[6, 8, 2], 1.0);
        let dm = Tensor::zeros(&[6, 8, 8]);
        let (out, mask) = splat_lift(&[fm], &[dm], &[8.0], &calib, &grid, &bins).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        // geometry still covers cells even when probabilities vanish
        assert!(mask.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn splat_empties_grow_with_range() {
        let calib = canonical_calibration(640, 480, 320.0);
        let grid =
            GridSpec::new((0.0, 51.2), (-25.6, 25.6), (-3.0, 2.0), (0.32, 0.32, 0.5)).unwrap();
        let bins = DepthBinSpec::new(1.0, 51.2, 64).unwrap();
        let strides = [8.0f64, 16.0, 32.0];
        let mut fms = Vec::new();
        let mut dms = Vec::new();
        for s in strides {
            let (h, w) = ((480.0 / s).ceil() as usize, (640.0 / s).ceil() as usize);
            fms.push(Tensor::full(&[h, w, 1], 1.0));
            dms.push(Tensor::full(&[h, w, 64], 1.0 / 64.0));
        }
        let (_, mask) = splat_lift(&fms, &dms, &strides, &calib, &grid, &bins).unwrap();
        let mut empty = [0usize; 3];
        let mut total = [0usize; 3];
        for i in 0..grid.nx() {
            for j in 0..grid.ny() {
                let c = grid.voxel_center(i, j, 0);
                let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
                let band = if r < 25.0 {
                    0
                } else if r < 50.0 {
                    1
                } else if r < 70.0 {
                    2
                } else {
                    continue;
                };
                for k in 0..grid.nz() {
                    total[band] += 1;
                    if mask.at(&[i, j, k]) == 0.0 {
                        empty[band] += 1;
                    }
                }
            }
        }
        let frac: Vec<f64> = (0..3).map(|b| empty[b] as f64 / total[b] as f64).collect();
        assert!(
            frac[0] <= frac[1] && frac[1] <= frac[2],
            "empty fractions {:?}",
            frac
        );
        assert!(frac[2] > frac[0]);
    }

    #[test]
    fn crn_occupancy_empty_and_single_point() {
        let calib = canonical_calibration(64, 48, 40.0);
        let bins = DepthBinSpec::new(0.5, 16.5, 16).unwrap();
        let stride = 2.0;
        let empty = RadarPointCloud::from_channels(
            &Tensor::zeros(&[0, 7]),
            crate::pointcloud::ChannelLayout::vod(),
        )
        .unwrap();
        let centers = voxel_centers(&test_grid());
        let out =
            crn_frustum_occupancy(&empty, &calib, (24, 32), stride, &centers, &bins).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // (8, 2, 2) projects exactly to pixel (22, 14) at depth 8, the
        // frustum node (7, 11, 7); every value is float-exact
        let p = [8.0f32, 2.0, 2.0];
        let mut rows = vec![0.0f32; 7];
        rows[..3].copy_from_slice(&p);
        let cloud = RadarPointCloud::from_channels(
            &Tensor::from_vec(&[1, 7], rows).unwrap(),
            crate::pointcloud::ChannelLayout::vod(),
        )
        .unwrap();
        let single = Tensor::from_vec(&[1, 1, 1, 3], p.to_vec()).unwrap();
        let out = crn_frustum_occupancy(&cloud, &calib, (24, 32), stride, &single, &bins).unwrap();
        assert_relative_eq!(out.at(&[0, 0, 0]), 1.0, max_relative = 1e-6);
    }

    #[test]
    fn radar_depth_rounding_and_averaging() {
        let calib = canonical_calibration(320, 240, 260.0);
        let layout = crate::pointcloud::ChannelLayout::vod();
        let mk = |pts: &[nalgebra::Point3<f64>]| {
            let mut rows = Vec::new();
            for p in pts {
                rows.extend_from_slice(&[p.x as f32, p.y as f32, p.z as f32, 0.0, 0.0, 0.0, 0.0]);
            }
            RadarPointCloud::from_channels(
                &Tensor::from_vec(&[pts.len(), 7], rows).unwrap(),
                layout.clone(),
            )
            .unwrap()
        };
        let single = mk(&[calib.back_project(100.4, 50.6, 7.5).unwrap()]);
        let d = radar_depth_map(&single, &calib, (240, 320));
        assert_relative_eq!(d.at(&[51, 100]), 7.5, max_relative = 1e-5);
        assert_eq!(d.data().iter().filter(|&&v| v != 0.0).count(), 1);

        let pair = mk(&[
            calib.back_project(100.4, 50.6, 4.0).unwrap(),
            calib.back_project(100.2, 50.9, 6.0).unwrap(),
        ]);
        let d = radar_depth_map(&pair, &calib, (240, 320));
        assert_relative_eq!(d.at(&[51, 100]), 5.0, max_relative = 1e-5);

        let d = radar_depth_map(&mk(&[]), &calib, (240, 320));
        assert!(d.data().iter().all(|&v| v == 0.0));
    }
}
