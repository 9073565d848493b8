//! Patch grids, patch embedding, 2-D sin-cos positional encodings and
//! visible/masked split sampling.

use std::cell::Cell;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{M2dError, Result};

/// Tiling of an `F × T` spectrogram into `n_f × n_t` patches of
/// `patch_f × patch_t` cells. Patch `i` is grid cell `(i / n_t, i % n_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_f: usize,
    pub patch_t: usize,
    pub n_f: usize,
    pub n_t: usize,
}

impl PatchGrid {
    pub fn for_shape(n_mels: usize, n_frames: usize, patch_f: usize, patch_t: usize) -> Result<Self> {
        if patch_f == 0 || n_mels % patch_f != 0 || n_mels == 0 {
            return Err(M2dError::Tiling {
                axis: "frequency",
                len: n_mels,
                patch: patch_f,
            });
        }
        if patch_t == 0 || n_frames % patch_t != 0 || n_frames == 0 {
            return Err(M2dError::Tiling {
                axis: "time",
                len: n_frames,
                patch: patch_t,
            });
        }
        Ok(Self {
            patch_f,
            patch_t,
            n_f: n_mels / patch_f,
            n_t: n_frames / patch_t,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_f * self.n_t
    }

    pub fn patch_len(&self) -> usize {
        self.patch_f * self.patch_t
    }

    pub fn index(&self, f: usize, t: usize) -> usize {
        f * self.n_t + t
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.n_t, index % self.n_t)
    }
}

/// Visible/masked partition of patch indices. Both lists are ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Every patch visible. Used at inference time and in degenerate-split tests.
    pub fn all_visible(n_patches: usize) -> Self {
        Self {
            visible: (0..n_patches).collect(),
            masked: Vec::new(),
            ratio: 0.0,
        }
    }

    /// Build a plan from an explicit masked set.
    pub fn from_masked(n_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n_patches];
        for &m in masked {
            if m >= n_patches || is_masked[m] {
                return Err(M2dError::Consistency(format!(
                    "masked index {m} is out of range or repeated"
                )));
            }
            is_masked[m] = true;
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n_patches).partition(|&i| is_masked[i]);
        let ratio = masked.len() as f64 / n_patches.max(1) as f64;
        Ok(Self { visible, masked, ratio })
    }

    pub fn check(&self, n_patches: usize) -> Result<()> {
        let mut seen = vec![0u8; n_patches];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= n_patches {
                return Err(M2dError::Consistency(format!("patch index {i} >= {n_patches}")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(M2dError::Consistency("mask plan is not a partition".into()));
        }
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.visible) || !sorted(&self.masked) {
            return Err(M2dError::Consistency("mask plan lists must be ascending".into()));
        }
        Ok(())
    }
}

/// A set of `n` token vectors and the grid position each one came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>, positions: Vec<usize>) -> Result<Self> {
        if tokens.nrows() != positions.len() {
            return Err(M2dError::Dimension(format!(
                "{} tokens but {} positions",
                tokens.nrows(),
                positions.len()
            )));
        }
        Ok(Self { tokens, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Rows whose positions appear in `wanted`, in `wanted` order.
    pub fn select(&self, wanted: &[usize]) -> Result<TokenSequence> {
        let lookup = position_lookup(&self.positions);
        let mut out = Array2::zeros((wanted.len(), self.dim()));
        for (r, p) in wanted.iter().enumerate() {
            let src = lookup
                .get(*p)
                .copied()
                .flatten()
                .ok_or_else(|| M2dError::Consistency(format!("position {p} not present")))?;
            out.row_mut(r).assign(&self.tokens.row(src));
        }
        TokenSequence::new(out, wanted.to_vec())
    }
}

fn position_lookup(positions: &[usize]) -> Vec<Option<usize>> {
    let n = positions.iter().max().map_or(0, |m| m + 1);
    let mut lookup = vec![None; n];
    for (r, &p) in positions.iter().enumerate() {
        lookup[p] = Some(r);
    }
    lookup
}

/// Splits a spectrogram into its patch matrix, one flattened patch per row
/// in frequency-major order.
pub fn patchify(spec: &Spectrogram, patch_f: usize, patch_t: usize) -> Result<(PatchGrid, Array2<f64>)> {
    let grid = PatchGrid::for_shape(spec.n_mels(), spec.n_frames(), patch_f, patch_t)?;
    Ok((grid, patchify_view(spec.data.view(), &grid)))
}

pub(crate) fn patchify_view(data: ArrayView2<f64>, grid: &PatchGrid) -> Array2<f64> {
    let mut out = Array2::zeros((grid.n_patches(), grid.patch_len()));
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            let mut row = out.row_mut(grid.index(f, t));
            for i in 0..grid.patch_f {
                for j in 0..grid.patch_t {
                    row[i * grid.patch_t + j] = data[[f * grid.patch_f + i, t * grid.patch_t + j]];
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Array2<f64>, grid: &PatchGrid) -> Result<Array2<f64>> {
    if patches.dim() != (grid.n_patches(), grid.patch_len()) {
        return Err(M2dError::Dimension(format!(
            "patch matrix {:?} does not fit grid {grid:?}",
            patches.dim()
        )));
    }
    let mut out = Array2::zeros((grid.n_f * grid.patch_f, grid.n_t * grid.patch_t));
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            let row = patches.row(grid.index(f, t));
            for i in 0..grid.patch_f {
                for j in 0..grid.patch_t {
                    out[[f * grid.patch_f + i, t * grid.patch_t + j]] = row[i * grid.patch_t + j];
                }
            }
        }
    }
    Ok(out)
}

/// `patches · weight + bias`, positions `0..N`.
pub fn embed_patches(patches: &Array2<f64>, weight: &Array2<f64>, bias: &Array2<f64>) -> Result<TokenSequence> {
    if patches.ncols() != weight.nrows() {
        return Err(M2dError::Dimension(format!(
            "patch width {} does not match embedding weight rows {}",
            patches.ncols(),
            weight.nrows()
        )));
    }
    if bias.dim() != (1, weight.ncols()) {
        return Err(M2dError::Dimension(format!(
            "bias {:?} does not match embedding width {}",
            bias.dim(),
            weight.ncols()
        )));
    }
    let tokens = patches.dot(weight) + bias;
    TokenSequence::new(tokens, (0..patches.nrows()).collect())
}

/// 1-D sin-cos code of length `dim` for every position: first half sines,
/// second half cosines, frequencies `1 / 10000^(i / (dim / 2))`.
fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// Fixed 2-D sin-cos positional encoding, `N × dim`. The first `dim / 2`
/// columns encode the frequency index, the rest the time index.
pub fn make_positional_encoding(grid: &PatchGrid, dim: usize) -> Result<Array2<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(M2dError::config(
            "encoder.dim",
            format!("positional encoding needs a dimension divisible by 4, got {dim}"),
        ));
    }
    let half = dim / 2;
    let mut pe = Array2::zeros((grid.n_patches(), dim));
    let mut buf = vec![0.0; dim];
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            sincos_1d(half, f as f64, &mut buf[..half]);
            sincos_1d(half, t as f64, &mut buf[half..]);
            pe.row_mut(grid.index(f, t))
                .iter_mut()
                .zip(&buf)
                .for_each(|(o, v)| *o = *v);
        }
    }
    Ok(pe)
}

thread_local! {
    static MASK_DRAWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`sample_mask`] calls made on the current thread.
pub fn mask_draw_count() -> u64 {
    MASK_DRAWS.with(|c| c.get())
}

pub fn visible_count(n_patches: usize, ratio: f64) -> usize {
    // The small epsilon absorbs representation error, e.g. 190 * (1 - 0.7) = 56.999...
    (n_patches as f64 * (1.0 - ratio) + 1e-9).floor() as usize
}

/// Uniformly random split via Fisher-Yates shuffle and prefix split; the
/// first `floor(N * (1 - ratio))` shuffled indices become visible.
pub fn sample_mask<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    MASK_DRAWS.with(|c| c.set(c.get() + 1));
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(M2dError::config("mask_ratio", format!("must lie in (0, 1), got {ratio}")));
    }
    if n_patches < 2 {
        return Err(M2dError::config("mask_ratio", format!("need at least 2 patches, got {n_patches}")));
    }
    let n_visible = visible_count(n_patches, ratio);
    if n_visible == 0 || n_visible == n_patches {
        return Err(M2dError::config(
            "mask_ratio",
            format!("ratio {ratio} over {n_patches} patches leaves an empty side"),
        ));
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(rng);
    let mut visible = order[..n_visible].to_vec();
    let mut masked = order[n_visible..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan { visible, masked, ratio })
}
