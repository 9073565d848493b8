//! Online and target networks: patch embedding, the shared transformer
//! encoder, the predictor with its learnable mask token, and the EMA that
//! ties the target parameters to the online ones.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{M2dError, Result};
use crate::nn::params::{init_linear, trunc_normal, INIT_STD};
use crate::nn::transformer::{linear, run_stack, segments_for, StackShape};
use crate::nn::{Bound, Mat, ParamStore, Tape, Var};
use crate::patching::{make_positional_encoding, patchify, MaskPlan, PatchGrid, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_f: usize,
    pub patch_t: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            patch_f: 16,
            patch_t: 16,
        }
    }
}

impl EncoderConfig {
    /// ViT-Base shape.
    pub fn base() -> Self {
        Self {
            depth: 12,
            dim: 768,
            heads: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(M2dError::config("encoder.depth", "must be at least 1"));
        }
        self.validate_shape()
    }

    /// Shape checks only; zero depth is allowed.
    pub fn validate_shape(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(M2dError::config(
                "encoder.heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(M2dError::config("encoder.dim", "must be a positive multiple of 4"));
        }
        if self.patch_f == 0 || self.patch_t == 0 {
            return Err(M2dError::config("encoder.patch_f", "patch sides must be positive"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(M2dError::config("encoder.mlp_ratio", "must be positive"));
        }
        Ok(())
    }

    pub fn stack(&self) -> StackShape {
        StackShape {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mlp_hidden: (self.dim as f64 * self.mlp_ratio).round() as usize,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_f * self.patch_t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub depth: usize,
    /// Width of the predictor blocks; half the encoder width when absent.
    pub dim: Option<usize>,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: None,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl PredictorConfig {
    pub fn width(&self, encoder_dim: usize) -> usize {
        self.dim.unwrap_or(encoder_dim / 2)
    }

    pub fn validate(&self, encoder_dim: usize) -> Result<()> {
        let w = self.width(encoder_dim);
        if w == 0 || self.heads == 0 || w % self.heads != 0 {
            return Err(M2dError::config(
                "predictor.heads",
                format!("predictor width {w} is not divisible by {} heads", self.heads),
            ));
        }
        Ok(())
    }

    pub fn stack(&self, encoder_dim: usize) -> StackShape {
        let dim = self.width(encoder_dim);
        StackShape {
            depth: self.depth,
            dim,
            heads: self.heads,
            mlp_hidden: (dim as f64 * self.mlp_ratio).round() as usize,
        }
    }
}

/// Anything carrying a patch embedding and an encoder stack under the
/// `embed.` and `encoder.` prefixes.
pub trait EncoderParams {
    fn encoder_config(&self) -> &EncoderConfig;
    fn params(&self) -> &ParamStore;
}

/// The trainable branch: patch embedding, encoder, mask token and predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub params: ParamStore,
}

/// The momentum branch: patch embedding and encoder only.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    pub encoder: EncoderConfig,
    pub params: ParamStore,
}

impl EncoderParams for OnlineState {
    fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl EncoderParams for TargetState {
    fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

pub(crate) fn init_encoder_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) {
    init_linear(store, "embed.", cfg.patch_len(), cfg.dim, rng);
    crate::nn::transformer::init_stack(store, "encoder.", cfg.stack(), rng);
}

impl OnlineState {
    pub fn init<R: Rng + ?Sized>(encoder: EncoderConfig, predictor: PredictorConfig, rng: &mut R) -> Result<Self> {
        encoder.validate_shape()?;
        predictor.validate(encoder.dim)?;
        let mut params = ParamStore::new();
        init_encoder_params(&mut params, &encoder, rng);
        params.insert("mask_token", trunc_normal(rng, 1, encoder.dim, INIT_STD));
        if predictor.depth > 0 {
            let shape = predictor.stack(encoder.dim);
            init_linear(&mut params, "predictor.in.", encoder.dim, shape.dim, rng);
            crate::nn::transformer::init_stack(&mut params, "predictor.", shape, rng);
            init_linear(&mut params, "predictor.out.", shape.dim, encoder.dim, rng);
        }
        Ok(Self {
            encoder,
            predictor,
            params,
        })
    }

    /// Embed and encoder parameters only.
    pub fn encoder_params(&self) -> ParamStore {
        let mut s = self.params.subset("embed.");
        for (k, v) in self.params.subset("encoder.").iter() {
            s.insert(k.clone(), v.clone());
        }
        s
    }
}

impl TargetState {
    /// Exact copy of the online encoder.
    pub fn from_online(online: &OnlineState) -> Self {
        Self {
            encoder: online.encoder,
            params: online.encoder_params(),
        }
    }
}

/// Stacks the selected patch rows of every item into one matrix.
pub fn gather_patch_rows(patches: &[Mat], positions: &[Vec<usize>]) -> Mat {
    let total: usize = positions.iter().map(Vec::len).sum();
    let width = patches.first().map_or(0, |p| p.ncols());
    let mut out = Mat::zeros((total, width));
    let mut r = 0;
    for (p, pos) in patches.iter().zip(positions) {
        for &i in pos {
            out.row_mut(r).assign(&p.row(i));
            r += 1;
        }
    }
    out
}

/// Positional rows for every item, stacked in the same order as the tokens.
pub fn gather_pe_rows(pe: &Mat, positions: &[Vec<usize>]) -> Mat {
    let total: usize = positions.iter().map(Vec::len).sum();
    let mut out = Mat::zeros((total, pe.ncols()));
    for (r, &i) in positions.iter().flatten().enumerate() {
        out.row_mut(r).assign(&pe.row(i));
    }
    out
}

/// Adds positional rows to already-embedded tokens and runs the first `upto`
/// encoder blocks. Returns the output node and per-item row ranges.
pub fn encode_tokens_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &EncoderConfig,
    tokens: Var,
    positions: &[Vec<usize>],
    pe: &Mat,
    upto: usize,
) -> (Var, Vec<Range<usize>>) {
    let segments = segments_for(positions.iter().map(Vec::len));
    let pe_rows = tape.constant(gather_pe_rows(pe, positions));
    let x = tape.add(tokens, pe_rows);
    let out = run_stack(tape, p, "encoder.", cfg.stack(), upto, x, &segments);
    (out, segments)
}

/// Patch embedding followed by [`encode_tokens_on_tape`].
pub fn encode_patches_on_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &EncoderConfig,
    patch_rows: Mat,
    positions: &[Vec<usize>],
    pe: &Mat,
    upto: usize,
) -> (Var, Vec<Range<usize>>) {
    let x = tape.constant(patch_rows);
    let tokens = linear(tape, p, "embed.", x);
    encode_tokens_on_tape(tape, p, cfg, tokens, positions, pe, upto)
}

/// Builds each item's full-length predictor input (visible encodings at
/// visible positions, mask token elsewhere, original patch order), adds
/// positional rows and runs the predictor. `z_v` stacks the visible
/// encodings of every item in plan order.
pub fn predict_on_tape(
    tape: &mut Tape,
    p: &Bound,
    online: &OnlineState,
    z_v: Var,
    plans: &[MaskPlan],
    pe: &Mat,
) -> Var {
    let mask = p.get("mask_token");
    let cat = tape.concat_rows(&[z_v, mask]);
    let mask_row = tape.value(z_v).nrows();
    let mut index = Vec::new();
    let mut offset = 0;
    for plan in plans {
        let n = plan.n_patches();
        let mut slot = vec![mask_row; n];
        for (rank, &pos) in plan.visible.iter().enumerate() {
            slot[pos] = offset + rank;
        }
        offset += plan.visible.len();
        index.extend(slot);
    }
    let seq = tape.gather_rows(cat, index);
    let all: Vec<Vec<usize>> = plans.iter().map(|pl| (0..pl.n_patches()).collect()).collect();
    let pe_rows = tape.constant(gather_pe_rows(pe, &all));
    let x = tape.add(seq, pe_rows);
    if online.predictor.depth == 0 {
        return x;
    }
    let segments = segments_for(plans.iter().map(MaskPlan::n_patches));
    let h = linear(tape, p, "predictor.in.", x);
    let h = run_stack(tape, p, "predictor.", online.predictor.stack(online.encoder.dim), usize::MAX, h, &segments);
    linear(tape, p, "predictor.out.", h)
}

/// Runs the encoder on embedded tokens: positional rows at `tokens.positions`
/// are added before the blocks.
pub fn encode(state: &impl EncoderParams, tokens: &TokenSequence, pe: &Mat) -> Result<TokenSequence> {
    let cfg = state.encoder_config();
    check_tokens(tokens, cfg.dim, pe)?;
    let mut tape = Tape::new();
    let p = state.params().bind(&mut tape, false);
    let x = tape.constant(tokens.tokens.clone());
    let (out, _) = encode_tokens_on_tape(&mut tape, &p, cfg, x, &[tokens.positions.clone()], pe, usize::MAX);
    TokenSequence::new(tape.value(out).clone(), tokens.positions.clone())
}

fn check_tokens(tokens: &TokenSequence, dim: usize, pe: &Mat) -> Result<()> {
    if tokens.dim() != dim || pe.ncols() != dim {
        return Err(M2dError::Dimension(format!(
            "token width {} / positional width {} vs model width {dim}",
            tokens.dim(),
            pe.ncols()
        )));
    }
    if let Some(&bad) = tokens.positions.iter().find(|&&p| p >= pe.nrows()) {
        return Err(M2dError::Dimension(format!(
            "position {bad} outside positional table of {} rows",
            pe.nrows()
        )));
    }
    Ok(())
}

/// Embeds and encodes the patches at `positions`, using the first `upto`
/// encoder blocks.
pub fn encode_patches(
    state: &impl EncoderParams,
    patches: &Mat,
    positions: &[usize],
    pe: &Mat,
    upto: usize,
) -> Result<TokenSequence> {
    let cfg = state.encoder_config();
    if patches.ncols() != cfg.patch_len() {
        return Err(M2dError::Dimension(format!(
            "patch width {} vs embedding input {}",
            patches.ncols(),
            cfg.patch_len()
        )));
    }
    let mut tape = Tape::new();
    let p = state.params().bind(&mut tape, false);
    let pos = vec![positions.to_vec()];
    let rows = gather_patch_rows(std::slice::from_ref(patches), &pos);
    let (out, _) = encode_patches_on_tape(&mut tape, &p, cfg, rows, &pos, pe, upto);
    TokenSequence::new(tape.value(out).clone(), positions.to_vec())
}

/// Encodes every patch of a standardized spectrogram, no masking.
pub fn encode_all(state: &impl EncoderParams, spec: &Spectrogram) -> Result<(PatchGrid, TokenSequence)> {
    let cfg = state.encoder_config();
    let (grid, patches) = patchify(spec, cfg.patch_f, cfg.patch_t)?;
    let pe = make_positional_encoding(&grid, cfg.dim)?;
    let all: Vec<usize> = (0..grid.n_patches()).collect();
    Ok((grid, encode_patches(state, &patches, &all, &pe, usize::MAX)?))
}

/// Runs the predictor for one item; returns predictions at all `N` positions.
pub fn predict(online: &OnlineState, z_v: &TokenSequence, plan: &MaskPlan, pe: &Mat) -> Result<TokenSequence> {
    if z_v.positions != plan.visible {
        return Err(M2dError::Consistency(
            "visible encodings do not match the plan's visible positions".into(),
        ));
    }
    plan.check(plan.n_patches())?;
    if pe.nrows() != plan.n_patches() {
        return Err(M2dError::Consistency(format!(
            "positional table has {} rows for {} patches",
            pe.nrows(),
            plan.n_patches()
        )));
    }
    check_tokens(z_v, online.encoder.dim, pe)?;
    let mut tape = Tape::new();
    let p = online.params.bind(&mut tape, false);
    let zv = tape.constant(z_v.tokens.clone());
    let out = predict_on_tape(&mut tape, &p, online, zv, std::slice::from_ref(plan), pe);
    TokenSequence::new(tape.value(out).clone(), (0..plan.n_patches()).collect())
}

/// Rows of `z_hat` at the plan's masked positions, in plan order.
pub fn filter_masked(z_hat: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    z_hat.select(&plan.masked)
}

/// Union of two disjoint token sets, ordered by position.
pub fn merge_tokens(a: &TokenSequence, b: &TokenSequence) -> Result<TokenSequence> {
    if a.dim() != b.dim() {
        return Err(M2dError::Dimension("token widths differ".into()));
    }
    let mut order: Vec<(usize, bool, usize)> = a
        .positions
        .iter()
        .enumerate()
        .map(|(r, &p)| (p, false, r))
        .chain(b.positions.iter().enumerate().map(|(r, &p)| (p, true, r)))
        .collect();
    order.sort_unstable();
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(M2dError::Consistency("token sets overlap".into()));
    }
    let mut out = Array2::zeros((order.len(), a.dim()));
    for (i, &(_, from_b, r)) in order.iter().enumerate() {
        let src = if from_b { &b.tokens } else { &a.tokens };
        out.row_mut(i).assign(&src.row(r));
    }
    TokenSequence::new(out, order.iter().map(|o| o.0).collect())
}

/// `target ← tau · target + (1 - tau) · online` over the embed and encoder parameters.
pub fn ema_update(target: &mut TargetState, online: &OnlineState, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(M2dError::Domain(format!("tau must lie in [0, 1], got {tau}")));
    }
    let source = online.encoder_params();
    target.params.check_same_layout(&source)?;
    for ((_, t), (_, o)) in target.params.iter_mut().zip(source.iter()) {
        ndarray::Zip::from(t).and(o).for_each(|t, &o| *t = tau * *t + (1.0 - tau) * o);
    }
    Ok(())
}

pub const TARGET_STD_EPS: f64 = 1e-6;

/// How target encodings are standardized before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetNorm {
    /// Each token over its own feature values.
    #[default]
    PerToken,
    /// One mean and variance over every value of the masked set.
    WholeSet,
}

pub fn standardize_rows(m: &Mat, axis: TargetNorm) -> Mat {
    let mut out = m.clone();
    match axis {
        TargetNorm::PerToken => {
            for mut row in out.rows_mut() {
                let d = row.len() as f64;
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                let s = (var + TARGET_STD_EPS).sqrt();
                row.mapv_inplace(|v| (v - mean) / s);
            }
        }
        TargetNorm::WholeSet => {
            let n = out.len() as f64;
            let mean = out.sum() / n;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + TARGET_STD_EPS).sqrt();
            out.mapv_inplace(|v| (v - mean) / s);
        }
    }
    out
}

/// Per-token standardization of target encodings.
pub fn standardize_target(z_m: &TokenSequence) -> TokenSequence {
    TokenSequence {
        tokens: standardize_rows(&z_m.tokens, TargetNorm::PerToken),
        positions: z_m.positions.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::sample_mask;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(depth: usize, pred_depth: usize) -> OnlineState {
        let enc = EncoderConfig {
            depth,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_f: 2,
            patch_t: 2,
        };
        let pred = PredictorConfig {
            depth: pred_depth,
            dim: Some(4),
            heads: 2,
            mlp_ratio: 2.0,
        };
        OnlineState::init(enc, pred, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn grid() -> PatchGrid {
        PatchGrid { patch_f: 2, patch_t: 2, n_f: 2, n_t: 5 }
    }

    #[test]
    fn zero_depth_encoder_is_passthrough() {
        let s = tiny(0, 1);
        let pe = make_positional_encoding(&grid(), 8).unwrap();
        let tokens = TokenSequence::new(Mat::from_elem((3, 8), 0.5), vec![1, 4, 7]).unwrap();
        let out = encode(&s, &tokens, &pe).unwrap();
        for (r, &p) in tokens.positions.iter().enumerate() {
            let expect = &tokens.tokens.row(r) + &pe.row(p);
            assert_eq!(out.tokens.row(r), expect);
        }
    }

    #[test]
    fn encode_shape_and_errors() {
        let s = tiny(1, 1);
        let g = PatchGrid { patch_f: 16, patch_t: 16, n_f: 5, n_t: 38 };
        let pe = make_positional_encoding(&g, 8).unwrap();
        let tokens = TokenSequence::new(Mat::ones((5, 8)), vec![0, 50, 100, 150, 189]).unwrap();
        assert_eq!(encode(&s, &tokens, &pe).unwrap().tokens.dim(), (5, 8));
        let bad = TokenSequence::new(Mat::ones((1, 8)), vec![190]).unwrap();
        assert!(encode(&s, &bad, &pe).is_err());
        let wide = TokenSequence::new(Mat::ones((1, 12)), vec![0]).unwrap();
        assert!(matches!(encode(&s, &wide, &pe), Err(M2dError::Dimension(_))));
    }

    #[test]
    fn zero_depth_predictor_masked_rows() {
        let s = tiny(1, 0);
        let pe = make_positional_encoding(&grid(), 8).unwrap();
        let plan = sample_mask(10, 0.6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let z_v = TokenSequence::new(Mat::ones((plan.visible.len(), 8)), plan.visible.clone()).unwrap();
        let z_hat = predict(&s, &z_v, &plan, &pe).unwrap();
        assert_eq!(z_hat.tokens.dim(), (10, 8));
        let m = s.params.expect("mask_token");
        for &i in &plan.masked {
            assert_eq!(z_hat.tokens.row(i), &m.row(0) + &pe.row(i));
        }
        for &i in &plan.visible {
            assert_eq!(z_hat.tokens.row(i), &Mat::ones((1, 8)).row(0) + &pe.row(i));
        }
    }

    #[test]
    fn predict_rejects_mismatched_plan() {
        let s = tiny(1, 1);
        let pe = make_positional_encoding(&grid(), 8).unwrap();
        let plan = sample_mask(10, 0.6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let z_v = TokenSequence::new(Mat::ones((1, 8)), vec![plan.masked[0]]).unwrap();
        assert!(matches!(predict(&s, &z_v, &plan, &pe), Err(M2dError::Consistency(_))));
    }

    #[test]
    fn filter_and_merge_round_trip() {
        let z = TokenSequence::new(Mat::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64), (0..6).collect()).unwrap();
        let plan = MaskPlan::from_masked(6, &[1, 2, 3, 4, 5]).unwrap();
        let zm = filter_masked(&z, &plan).unwrap();
        assert_eq!(zm.tokens.dim(), (5, 3));
        assert_eq!(zm.positions, vec![1, 2, 3, 4, 5]);
        let zv = z.select(&plan.visible).unwrap();
        assert_eq!(merge_tokens(&zv, &zm).unwrap(), z);
    }

    #[test]
    fn ema_endpoints() {
        let online = tiny(1, 1);
        let mut other = tiny(1, 1);
        other.params = OnlineState::init(online.encoder, online.predictor, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap()
            .params;
        let mut target = TargetState::from_online(&other);
        let before = target.clone();
        ema_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, before);
        ema_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target.params, online.encoder_params());
        assert!(ema_update(&mut target, &online, 1.5).is_err());
    }

    #[test]
    fn ema_scalar() {
        let online = tiny(1, 1);
        let mut target = TargetState::from_online(&online);
        let mut on = online.clone();
        on.params.get_mut("embed.bias").unwrap().fill(0.0);
        target.params.get_mut("embed.bias").unwrap().fill(1.0);
        ema_update(&mut target, &on, 0.5).unwrap();
        assert!(target.params.expect("embed.bias").iter().all(|&v| v == 0.5));
    }

    #[test]
    fn standardize_target_examples() {
        let z = TokenSequence::new(array![[1.0, 3.0], [5.0, 5.0]], vec![0, 1]).unwrap();
        let s = standardize_target(&z);
        assert!((s.tokens[[0, 0]] + 1.0).abs() < 1e-5 && (s.tokens[[0, 1]] - 1.0).abs() < 1e-5);
        assert_eq!(s.tokens.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn target_copies_online_encoder() {
        let online = tiny(2, 1);
        let target = TargetState::from_online(&online);
        assert!(target.params.names().all(|n| n.starts_with("embed.") || n.starts_with("encoder.")));
        assert!(target.params.get("mask_token").is_none());
        for (k, v) in target.params.iter() {
            assert_eq!(online.params.expect(k), v);
        }
    }
}
