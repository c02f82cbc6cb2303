//! The learned 1×1-convolution heads as explicit linear maps with loadable
//! weights: per-cell occupancy, per-pixel depth distributions, and the
//! concat-then-conv BEV fusion. No training happens here; weights come from
//! an archive file or a seeded generator.
//!
//! All tensors are channel-last, so a 1×1 convolution is a matrix-vector
//! product on each trailing row. Accumulation runs in f64 and results are
//! stored as f32.

use rayon::prelude::*;

use crate::error::{shape_mismatch, Error, Result};
use crate::synth::SplitRng;
use crate::tensor::Tensor;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- weights

/// Dense weights of a 1×1 convolution: C_out×C_in matrix plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1Weights {
    weight: Tensor,
    bias: Vec<f32>,
}

impl Conv1x1Weights {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Conv1x1Weights> {
        if weight.rank() != 2 {
            return Err(shape_mismatch(
                "conv weights",
                "C_out×C_in",
                format!("{:?}", weight.shape()),
            ));
        }
        if weight.shape()[0] != bias.len() {
            return Err(shape_mismatch(
                "conv bias",
                format!("{} entries", weight.shape()[0]),
                format!("{} entries", bias.len()),
            ));
        }
        if !weight.all_finite() || bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("conv weights: non-finite entries".into()));
        }
        Ok(Conv1x1Weights { weight, bias })
    }

    /// Deterministic pseudo-random weights in ±1/√C_in, for tests and for
    /// running the pipeline without a weight file.
    pub fn seeded(c_out: usize, c_in: usize, rng: &mut SplitRng) -> Conv1x1Weights {
        let scale = 1.0 / (c_in.max(1) as f64).sqrt();
        let mut w = Tensor::zeros(&[c_out, c_in]);
        for v in w.data_mut() {
            *v = (rng.uniform(-scale, scale)) as f32;
        }
        let bias = (0..c_out)
            .map(|_| rng.uniform(-0.1, 0.1) as f32)
            .collect();
        Conv1x1Weights { weight: w, bias }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    fn apply_into(&self, input: &[f32], out: &mut [f32]) {
        let c_in = self.c_in();
        for (o, slot) in out.iter_mut().enumerate() {
            let row = self.weight.row(&[o]);
            let mut acc = self.bias[o] as f64;
            for c in 0..c_in {
                acc += row[c] as f64 * input[c] as f64;
            }
            *slot = acc as f32;
        }
    }
}

/// Apply a 1×1 convolution along the last axis of a channel-last tensor.
pub fn conv1x1(input: &Tensor, w: &Conv1x1Weights) -> Result<Tensor> {
    let c_in = *input
        .shape()
        .last()
        .ok_or_else(|| shape_mismatch("conv input", "rank ≥ 1", "rank 0"))?;
    if c_in != w.c_in() {
        return Err(shape_mismatch(
            "conv input channels",
            format!("{}", w.c_in()),
            format!("{}", c_in),
        ));
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = w.c_out();
    let mut out = Tensor::zeros(&shape);
    let c_out = w.c_out();
    out.data_mut()
        .par_chunks_mut(c_out)
        .zip(input.data().par_chunks(c_in))
        .for_each(|(o, i)| w.apply_into(i, o));
    Ok(out)
}

// ---------------------------------------------------------------- depth bins

/// Uniform depth discretization over [d_min, d_max): bin k covers
/// [d_min + kΔ, d_min + (k+1)Δ), Δ = (d_max − d_min)/D.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, bins: usize) -> Result<DepthBinSpec> {
        if !(d_min > 0.0 && d_min.is_finite() && d_max.is_finite()) {
            return Err(Error::Config(format!("depth bins: d_min {} must be positive", d_min)));
        }
        if d_max <= d_min {
            return Err(Error::Config("depth bins: d_max must exceed d_min".into()));
        }
        if bins == 0 {
            return Err(Error::Config("depth bins: need at least one bin".into()));
        }
        Ok(DepthBinSpec { d_min, d_max, bins })
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.bins as f64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * self.width()
    }

    /// Bin containing a depth, or None outside [d_min, d_max).
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        let k = ((d - self.d_min) / self.width()).floor();
        if k < 0.0 || k >= self.bins as f64 {
            None
        } else {
            Some(k as usize)
        }
    }

    /// Continuous bin coordinate: bin centers sit at integer coordinates,
    /// so coord(bin_center(k)) = k. Used by depth-axis interpolation.
    pub fn depth_to_coord(&self, d: f64) -> f64 {
        (d - self.d_min) / self.width() - 0.5
    }
}

// ---------------------------------------------------------------- heads

/// Per-cell occupancy from radar BEV features: sigmoid of a 1×1 conv,
/// X×Y×C_P in, X×Y×Z out. Outputs are clamped a hair inside (0, 1) so the
/// strict bound survives f32 rounding at extreme logits.
pub fn occupancy_net(radar_bev: &Tensor, w: &Conv1x1Weights) -> Result<Tensor> {
    if radar_bev.rank() != 3 {
        return Err(shape_mismatch(
            "occupancy input",
            "X×Y×C_P",
            format!("{:?}", radar_bev.shape()),
        ));
    }
    let mut out = conv1x1(radar_bev, w)?;
    out.data_mut().par_iter_mut().for_each(|v| {
        *v = (sigmoid(*v as f64) as f32).clamp(1e-7, 1.0 - 1e-7);
    });
    Ok(out)
}

/// Per-pixel depth distribution: softmax of a 1×1 conv along the last axis,
/// H×W×C_I in, H×W×D out. Softmax subtracts the row max before
/// exponentiating and accumulates in f64.
pub fn depth_net(features: &Tensor, w: &Conv1x1Weights) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(shape_mismatch(
            "depth input",
            "H×W×C_I",
            format!("{:?}", features.shape()),
        ));
    }
    let mut out = conv1x1(features, w)?;
    let d = w.c_out();
    out.data_mut().par_chunks_mut(d).for_each(|row| {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut sum = 0.0f64;
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| {
                let e = (v as f64 - max).exp();
                sum += e;
                e
            })
            .collect();
        for (slot, e) in row.iter_mut().zip(exps) {
            *slot = (e / sum) as f32;
        }
    });
    Ok(out)
}

/// Fuse radar and image BEV maps: channel concatenation (radar first) then
/// a per-cell linear map.
pub fn fuse_bev(radar_bev: &Tensor, image_bev: &Tensor, w: &Conv1x1Weights) -> Result<Tensor> {
    if radar_bev.rank() != 3 || image_bev.rank() != 3 {
        return Err(shape_mismatch("fuse inputs", "X×Y×C", "other rank"));
    }
    let (x, y) = (radar_bev.shape()[0], radar_bev.shape()[1]);
    if image_bev.shape()[0] != x || image_bev.shape()[1] != y {
        return Err(shape_mismatch(
            "fuse spatial shape",
            format!("{}×{}", x, y),
            format!("{}×{}", image_bev.shape()[0], image_bev.shape()[1]),
        ));
    }
    let (cr, ci) = (radar_bev.shape()[2], image_bev.shape()[2]);
    if w.c_in() != cr + ci {
        return Err(shape_mismatch(
            "fuse input channels",
            format!("{}", cr + ci),
            format!("{}", w.c_in()),
        ));
    }
    let mut out = Tensor::zeros(&[x, y, w.c_out()]);
    let c_out = w.c_out();
    out.data_mut()
        .par_chunks_mut(c_out)
        .zip(radar_bev.data().par_chunks(cr))
        .zip(image_bev.data().par_chunks(ci))
        .for_each(|((o, r), i)| {
            let mut cat = Vec::with_capacity(cr + ci);
            cat.extend_from_slice(r);
            cat.extend_from_slice(i);
            w.apply_into(&cat, o);
        });
    Ok(out)
}
