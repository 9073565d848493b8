//! Turning a trained encoder into a feature extractor: per-time-frame
//! rearrangement of patch tokens, clip pooling, chunked encoding of
//! arbitrary-length input and positional-encoding interpolation.

use ndarray::{concatenate, s, Array2, Array3, Axis};

use crate::audio::Spectrogram;
use crate::error::{M2dError, Result};
use crate::networks::{encode_all, EncoderParams};
use crate::nn::Mat;
use crate::patching::PatchGrid;

/// `B × N_T × (N_F · D)` frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub data: Array3<f64>,
    pub frames_per_second: f64,
}

impl FrameFeatures {
    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// `B × (N_F · D)` temporal means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeature {
    pub data: Array2<f64>,
}

/// Source flat index, within one item's `N × D` token matrix, of every
/// element of its `N_T × (N_F · D)` frame matrix in row-major order.
pub fn timeframe_index_map(grid: &PatchGrid, dim: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(grid.n_patches() * dim);
    for t in 0..grid.n_t {
        for f in 0..grid.n_f {
            let src_row = grid.index(f, t);
            map.extend((0..dim).map(|d| src_row * dim + d));
        }
    }
    map
}

/// `z'[b, t, f·D + d] = z[b, f·N_T + t, d]`.
pub fn reshape_timeframe(z: &Array3<f64>, grid: &PatchGrid, frames_per_second: f64) -> Result<FrameFeatures> {
    let (b, n, d) = z.dim();
    if n != grid.n_patches() {
        return Err(M2dError::Dimension(format!(
            "{n} tokens per item but the grid has {} patches",
            grid.n_patches()
        )));
    }
    let mut out = Array3::zeros((b, grid.n_t, grid.n_f * d));
    for i in 0..b {
        for f in 0..grid.n_f {
            for t in 0..grid.n_t {
                out.slice_mut(s![i, t, f * d..(f + 1) * d])
                    .assign(&z.slice(s![i, grid.index(f, t), ..]));
            }
        }
    }
    Ok(FrameFeatures {
        data: out,
        frames_per_second,
    })
}

/// Single-item form of [`reshape_timeframe`] on an `N × D` matrix.
pub fn reshape_item(tokens: &Mat, grid: &PatchGrid) -> Result<Mat> {
    let z = tokens.clone().insert_axis(Axis(0));
    Ok(reshape_timeframe(&z, grid, 0.0)?.data.index_axis_move(Axis(0), 0))
}

/// Inverse of [`reshape_timeframe`].
pub fn inverse_timeframe(frames: &FrameFeatures, grid: &PatchGrid) -> Result<Array3<f64>> {
    let (b, nt, w) = frames.data.dim();
    if nt != grid.n_t || w % grid.n_f != 0 {
        return Err(M2dError::Dimension(format!(
            "frame features {:?} do not fit grid {grid:?}",
            frames.data.dim()
        )));
    }
    let d = w / grid.n_f;
    let mut z = Array3::zeros((b, grid.n_patches(), d));
    for i in 0..b {
        for f in 0..grid.n_f {
            for t in 0..grid.n_t {
                z.slice_mut(s![i, grid.index(f, t), ..])
                    .assign(&frames.data.slice(s![i, t, f * d..(f + 1) * d]));
            }
        }
    }
    Ok(z)
}

pub fn clip_feature(frames: &FrameFeatures) -> Result<ClipFeature> {
    if frames.n_frames() == 0 {
        return Err(M2dError::EmptyBatch("no frames to pool".into()));
    }
    Ok(ClipFeature {
        data: frames.data.mean_axis(Axis(1)).expect("non-empty"),
    })
}

/// Splits `audio` into `chunk_frames`-long pieces (tail padded with 0, the
/// standardized dataset mean), encodes each with every patch visible,
/// rearranges to frames and concatenates along time.
pub fn encode_chunked(encoder: &impl EncoderParams, audio: &Spectrogram, chunk_frames: usize) -> Result<FrameFeatures> {
    let cfg = encoder.encoder_config();
    if chunk_frames == 0 || chunk_frames % cfg.patch_t != 0 {
        return Err(M2dError::config(
            "chunk_frames",
            format!("{chunk_frames} is not a positive multiple of the patch width {}", cfg.patch_t),
        ));
    }
    let n_chunks = audio.n_frames().div_ceil(chunk_frames).max(1);
    let mut parts = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let chunk = audio.fit_frames(chunk_frames, c * chunk_frames, 0.0);
        let (grid, tokens) = encode_all(encoder, &chunk)?;
        parts.push(reshape_item(&tokens.tokens, &grid)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let all = concatenate(Axis(0), &views).expect("equal widths");
    Ok(FrameFeatures {
        data: all.insert_axis(Axis(0)),
        frames_per_second: audio.config.frames_per_second() / cfg.patch_t as f64,
    })
}

/// Linearly resamples the time axis of a positional table laid out on
/// `grid` to `new_n_t` columns, with the end points aligned. A single
/// output column samples the middle of the original axis.
pub fn interpolate_pe(pe: &Mat, grid: &PatchGrid, new_n_t: usize) -> Result<Mat> {
    if pe.nrows() != grid.n_patches() {
        return Err(M2dError::Dimension(format!(
            "positional table has {} rows, grid has {} patches",
            pe.nrows(),
            grid.n_patches()
        )));
    }
    if new_n_t == 0 {
        return Err(M2dError::Domain("new time length must be at least 1".into()));
    }
    if new_n_t == grid.n_t {
        return Ok(pe.clone());
    }
    let d = pe.ncols();
    let mut out = Mat::zeros((grid.n_f * new_n_t, d));
    for f in 0..grid.n_f {
        for t in 0..new_n_t {
            let src = if new_n_t == 1 {
                (grid.n_t - 1) as f64 / 2.0
            } else {
                t as f64 * (grid.n_t - 1) as f64 / (new_n_t - 1) as f64
            };
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(grid.n_t - 1);
            let w = src - lo as f64;
            let row = &pe.row(grid.index(f, lo)) * (1.0 - w) + &pe.row(grid.index(f, hi)) * w;
            out.row_mut(f * new_n_t + t).assign(&row);
        }
    }
    Ok(out)
}
