//! M2D-X: an offline network next to the M2D branch. The M2D branch reads
//! noisy audio; the offline branch scores the M2D features against a
//! training signal computed from clean data (labels, a frozen teacher, or
//! the original pre-trained weights), and both losses are combined.

use std::sync::Arc;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mix_noisy, standardize, DatasetStats, Spectrogram};
use crate::error::{M2dError, Result};
use crate::networks::{
    encode_patches, encode_patches_on_tape, gather_patch_rows, merge_tokens, predict_on_tape, EncoderParams,
    OnlineState, TargetState,
};
use crate::nn::params::init_linear;
use crate::nn::transformer::linear;
use crate::nn::{Mat, ParamStore, Tape, Var};
use crate::patching::{make_positional_encoding, patchify, MaskPlan, PatchGrid, TokenSequence};
use crate::training::{
    add_scaled, build_m2d_graph, grads_by_name, M2dTrainer, StepObserver, TrainStepReport,
};
use crate::transfer::{reshape_item, timeframe_index_map};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Pooled features to class logits, binary cross-entropy against labels.
    Supervised,
    /// Per-frame linear map onto a frozen teacher's features.
    Distill,
    /// Distillation from the frozen original weights that also initialize the online encoder.
    Regularize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub scenario: Scenario,
    pub lambda_m2d: f64,
    pub lambda_off: f64,
    /// Background-noise ratio used to build the M2D input.
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    /// `random`, `random:<seed>` or a checkpoint path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    /// Number of teacher blocks to run; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_layer: Option<usize>,
}

impl OfflineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "audioset" => Ok(Self {
                scenario: Scenario::Supervised,
                lambda_m2d: 1.0,
                lambda_off: 1.0,
                eta: 0.0,
                n_classes: None,
                teacher: None,
                teacher_layer: None,
            }),
            "speech" => Ok(Self {
                scenario: Scenario::Distill,
                lambda_m2d: 1.0,
                lambda_off: 0.5,
                eta: 0.2,
                n_classes: None,
                teacher: None,
                teacher_layer: None,
            }),
            "further" => Ok(Self {
                scenario: Scenario::Regularize,
                lambda_m2d: 1.0,
                lambda_off: 1.0,
                eta: 0.3,
                n_classes: None,
                teacher: None,
                teacher_layer: None,
            }),
            other => Err(M2dError::config("preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m2d >= 0.0 && self.lambda_off >= 0.0) {
            return Err(M2dError::config("offline.lambda_m2d", "loss weights must be non-negative"));
        }
        if !(self.lambda_m2d + self.lambda_off > 0.0) {
            return Err(M2dError::config("offline.lambda_off", "at least one loss weight must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(M2dError::config("offline.eta", format!("must lie in [0, 1], got {}", self.eta)));
        }
        match self.scenario {
            Scenario::Supervised => match self.n_classes {
                Some(n) if n >= 2 => Ok(()),
                _ => Err(M2dError::config("offline.n_classes", "supervised scenario needs at least 2 classes")),
            },
            Scenario::Distill | Scenario::Regularize => {
                if self.teacher.is_none() {
                    Err(M2dError::config("offline.teacher", "distill/regularize scenarios need a teacher"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// `L_m2dX = λ_m2d · L_m2d + λ_off · L_off`.
pub fn combined_loss(l_m2d: f64, l_off: f64, cfg: &OfflineConfig) -> f64 {
    cfg.lambda_m2d * l_m2d + cfg.lambda_off * l_off
}

/// One M2D-X batch. `x_noisy` and `y_audio` are standardized.
#[derive(Debug, Clone)]
pub struct OfflineBatch {
    pub x_noisy: Vec<Spectrogram>,
    pub y_audio: Option<Vec<Spectrogram>>,
    pub y_label: Option<Mat>,
}

impl OfflineBatch {
    /// Mixes raw target and background log-mels with `eta`, standardizes
    /// the mixture for the M2D branch and the clean target for the teacher.
    pub fn from_raw(
        targets: &[Spectrogram],
        backgrounds: &[Spectrogram],
        eta: f64,
        stats: &DatasetStats,
        labels: Option<Mat>,
    ) -> Result<Self> {
        if targets.len() != backgrounds.len() {
            return Err(M2dError::Dimension(format!(
                "{} targets but {} background clips",
                targets.len(),
                backgrounds.len()
            )));
        }
        let x_noisy = targets
            .iter()
            .zip(backgrounds)
            .map(|(t, b)| Ok(standardize(&mix_noisy(t, b, eta)?, stats)))
            .collect::<Result<Vec<_>>>()?;
        let y_audio = Some(targets.iter().map(|t| standardize(t, stats)).collect());
        Ok(Self {
            x_noisy,
            y_audio,
            y_label: labels,
        })
    }

    pub fn check(&self, cfg: &OfflineConfig) -> Result<()> {
        let b = self.x_noisy.len();
        if b == 0 {
            return Err(M2dError::EmptyBatch("offline batch has no items".into()));
        }
        match cfg.scenario {
            Scenario::Supervised => {
                let labels = self
                    .y_label
                    .as_ref()
                    .ok_or_else(|| M2dError::Consistency("supervised scenario needs labels".into()))?;
                let n = cfg.n_classes.unwrap_or(0);
                if labels.dim() != (b, n) {
                    return Err(M2dError::Dimension(format!(
                        "labels {:?} for {b} items and {n} classes",
                        labels.dim()
                    )));
                }
            }
            Scenario::Distill | Scenario::Regularize => {
                let audio = self
                    .y_audio
                    .as_ref()
                    .ok_or_else(|| M2dError::Consistency("teacher scenarios need clean audio".into()))?;
                if audio.len() != b {
                    return Err(M2dError::Dimension(format!("{} clean clips for {b} items", audio.len())));
                }
            }
        }
        Ok(())
    }
}

/// A frozen feature extractor producing per-frame training signals.
pub trait Teacher: Send + Sync {
    fn feature_dim(&self) -> usize;
    /// Which layer the features come from.
    fn layer_name(&self) -> String;
    /// `frames × feature_dim` features of one clean, standardized clip.
    fn features(&self, clean: &Spectrogram) -> Result<Mat>;
}

/// A frozen encoder whose per-patch output at a chosen block is rearranged
/// into per-frame features.
#[derive(Debug, Clone)]
pub struct EncoderTeacher {
    state: TargetState,
    layer: usize,
    n_mels: usize,
}

impl EncoderTeacher {
    /// `n_mels` is the height of the clips the teacher will see.
    pub fn new(state: TargetState, layer: Option<usize>, n_mels: usize) -> Result<Self> {
        state.encoder.validate_shape()?;
        if n_mels == 0 || n_mels % state.encoder.patch_f != 0 {
            return Err(M2dError::Tiling {
                axis: "frequency",
                len: n_mels,
                patch: state.encoder.patch_f,
            });
        }
        let depth = state.encoder.depth;
        let layer = layer.unwrap_or(depth);
        if layer > depth {
            return Err(M2dError::config(
                "offline.teacher_layer",
                format!("teacher has {depth} blocks, asked for layer {layer}"),
            ));
        }
        Ok(Self { state, layer, n_mels })
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    pub fn state(&self) -> &TargetState {
        &self.state
    }
}

impl Teacher for EncoderTeacher {
    fn feature_dim(&self) -> usize {
        self.state.encoder.dim * (self.n_mels / self.state.encoder.patch_f)
    }

    fn layer_name(&self) -> String {
        format!("encoder.blocks.{}", self.layer)
    }

    fn features(&self, clean: &Spectrogram) -> Result<Mat> {
        let cfg = self.state.encoder;
        let (grid, patches) = patchify(clean, cfg.patch_f, cfg.patch_t)?;
        let pe = make_positional_encoding(&grid, cfg.dim)?;
        let all: Vec<usize> = (0..grid.n_patches()).collect();
        let tokens = encode_patches(&self.state, &patches, &all, &pe, self.layer)?;
        reshape_item(&tokens.tokens, &grid)
    }
}

impl EncoderParams for EncoderTeacher {
    fn encoder_config(&self) -> &crate::networks::EncoderConfig {
        &self.state.encoder
    }
    fn params(&self) -> &ParamStore {
        &self.state.params
    }
}

/// Resamples `frames` (`T_src × D`) to `n` rows by linear interpolation
/// over frame centers. Equal lengths return the input unchanged.
pub fn align_frames(frames: &Mat, n: usize) -> Result<Mat> {
    let src = frames.nrows();
    if src == 0 || n == 0 {
        return Err(M2dError::Alignment(format!("cannot align {src} frames to {n}")));
    }
    if src == n {
        return Ok(frames.clone());
    }
    let mut out = Mat::zeros((n, frames.ncols()));
    for i in 0..n {
        let pos = ((i as f64 + 0.5) * src as f64 / n as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let w = pos - lo as f64;
        out.row_mut(i)
            .assign(&(&frames.row(lo) * (1.0 - w) + &frames.row(hi) * w));
    }
    Ok(out)
}

/// Linear mapper `in_dim → out_dim` under the `mapper.` prefix.
pub fn init_mapper<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    init_linear(&mut p, "mapper.", in_dim, out_dim, rng);
    p
}

/// Least-squares (minimum-norm) mapper with `features · W + b ≈ targets`.
pub fn fit_mapper_least_squares(features: &Mat, targets: &Mat) -> Result<ParamStore> {
    if features.nrows() != targets.nrows() {
        return Err(M2dError::Dimension("feature and target row counts differ".into()));
    }
    let (r, c) = features.dim();
    let x = DMatrix::from_fn(r, c + 1, |i, j| if j < c { features[[i, j]] } else { 1.0 });
    let y = DMatrix::from_fn(r, targets.ncols(), |i, j| targets[[i, j]]);
    let sol = x
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| M2dError::Consistency(format!("least squares failed: {e}")))?;
    let mut p = ParamStore::new();
    p.insert("mapper.weight", Mat::from_shape_fn((c, targets.ncols()), |(i, j)| sol[(i, j)]));
    p.insert("mapper.bias", Mat::from_shape_fn((1, targets.ncols()), |(_, j)| sol[(c, j)]));
    Ok(p)
}

/// Rearranges stacked visible encodings (`z_v`) and stacked full-length
/// predictions (`z_hat`, `N` rows per item) into per-frame features
/// `B·N_T × N_F·D`: visible rows come from `z_v`, masked rows from `z_hat`.
pub fn assemble_on_tape(tape: &mut Tape, z_v: Var, z_hat: Var, plans: &[MaskPlan], grid: &PatchGrid) -> Var {
    let d = tape.value(z_v).ncols();
    let n_vis_total = tape.value(z_v).nrows();
    let n = grid.n_patches();
    let cat = tape.concat_rows(&[z_v, z_hat]);
    let item_map = timeframe_index_map(grid, d);
    let mut map = Vec::with_capacity(plans.len() * item_map.len());
    let mut vis_offset = 0;
    for (b, plan) in plans.iter().enumerate() {
        let mut row_of = vec![0usize; n];
        for &m in &plan.masked {
            row_of[m] = n_vis_total + b * n + m;
        }
        for (rank, &v) in plan.visible.iter().enumerate() {
            row_of[v] = vis_offset + rank;
        }
        vis_offset += plan.visible.len();
        map.extend(item_map.iter().map(|&src| row_of[src / d] * d + src % d));
    }
    tape.rearrange(cat, (plans.len() * grid.n_t, grid.n_f * d), map)
}

/// Merges visible encodings and masked predictions in patch order and
/// rearranges them into `N_T × N_F·D` frame features.
pub fn assemble_audio_feature(
    z_v: &TokenSequence,
    z_hat_m: &TokenSequence,
    plan: &MaskPlan,
    grid: &PatchGrid,
) -> Result<Mat> {
    if z_v.positions != plan.visible || z_hat_m.positions != plan.masked {
        return Err(M2dError::Consistency("token positions do not match the plan".into()));
    }
    let all = merge_tokens(z_v, z_hat_m)?;
    if all.len() != grid.n_patches() || all.positions.iter().enumerate().any(|(i, &p)| i != p) {
        return Err(M2dError::Consistency(format!(
            "visible and masked tokens cover {} of {} patches",
            all.len(),
            grid.n_patches()
        )));
    }
    reshape_item(&all.tokens, grid)
}

/// Frame features the offline branch sees for each item of a batch.
pub fn assemble_batch_features(online: &OnlineState, specs: &[Spectrogram], plans: &[MaskPlan]) -> Result<Vec<Mat>> {
    let cfg = &online.encoder;
    let (grid, patches) = crate::training::patchify_batch(specs, cfg.patch_f, cfg.patch_t)?;
    let pe = make_positional_encoding(&grid, cfg.dim)?;
    let mut tape = Tape::new();
    let p = online.params.bind(&mut tape, false);
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let rows = gather_patch_rows(&patches, &visible);
    let (z_v, _) = encode_patches_on_tape(&mut tape, &p, cfg, rows, &visible, &pe, usize::MAX);
    let z_hat = predict_on_tape(&mut tape, &p, online, z_v, plans, &pe);
    let h = assemble_on_tape(&mut tape, z_v, z_hat, plans, &grid);
    Ok(split_rows(tape.value(h), grid.n_t))
}

fn split_rows(m: &Mat, rows: usize) -> Vec<Mat> {
    (0..m.nrows() / rows)
        .map(|b| m.slice(ndarray::s![b * rows..(b + 1) * rows, ..]).to_owned())
        .collect()
}

fn stack(items: &[Mat]) -> Result<Mat> {
    let views: Vec<_> = items.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| M2dError::Dimension(e.to_string()))
}

fn pool_matrix(items: usize, frames: usize) -> Mat {
    let mut m = Mat::zeros((items, items * frames));
    for b in 0..items {
        m.slice_mut(ndarray::s![b, b * frames..(b + 1) * frames])
            .fill(1.0 / frames as f64);
    }
    m
}

fn supervised_on_tape(tape: &mut Tape, h: Var, items: usize, frames: usize, mapper: &crate::nn::Bound, labels: &Mat) -> Var {
    let pool = tape.constant(pool_matrix(items, frames));
    let pooled = tape.matmul(pool, h);
    let logits = linear(tape, mapper, "mapper.", pooled);
    tape.bce_with_logits(logits, labels.clone())
}

fn distill_on_tape(tape: &mut Tape, h: Var, mapper: &crate::nn::Bound, teacher: Mat) -> Var {
    let mapped = linear(tape, mapper, "mapper.", h);
    let t = tape.constant(teacher);
    tape.cosine_loss(mapped, t)
}

fn check_mapper(mapper: &ParamStore, in_dim: usize, out_dim: usize) -> Result<()> {
    let w = mapper
        .get("mapper.weight")
        .ok_or_else(|| M2dError::Consistency("mapper has no weight".into()))?;
    if w.dim() != (in_dim, out_dim) {
        return Err(M2dError::Dimension(format!(
            "mapper {:?} but features are {in_dim} wide with {out_dim} outputs",
            w.dim()
        )));
    }
    Ok(())
}

/// Mean BCE of pooled-and-mapped frame features against multi-hot labels.
pub fn offline_supervised_loss(h_hat: &[Mat], y_label: &Mat, mapper: &ParamStore) -> Result<f64> {
    if h_hat.len() != y_label.nrows() {
        return Err(M2dError::Dimension(format!(
            "{} feature items vs {} label rows",
            h_hat.len(),
            y_label.nrows()
        )));
    }
    let frames = h_hat.first().map_or(0, |m| m.nrows());
    check_mapper(mapper, h_hat[0].ncols(), y_label.ncols())?;
    let mut tape = Tape::new();
    let h = tape.constant(stack(h_hat)?);
    let p = mapper.bind(&mut tape, false);
    let l = supervised_on_tape(&mut tape, h, h_hat.len(), frames, &p, y_label);
    Ok(tape.scalar(l))
}

/// Per-frame cosine-distance loss between mapped features and teacher frames.
pub fn offline_distill_loss(h_hat: &[Mat], y_tilde: &[Mat], mapper: &ParamStore) -> Result<f64> {
    if h_hat.len() != y_tilde.len() {
        return Err(M2dError::Alignment(format!("{} student vs {} teacher items", h_hat.len(), y_tilde.len())));
    }
    for (s, t) in h_hat.iter().zip(y_tilde) {
        if s.nrows() != t.nrows() {
            return Err(M2dError::Alignment(format!(
                "student has {} frames, teacher {}",
                s.nrows(),
                t.nrows()
            )));
        }
    }
    check_mapper(mapper, h_hat[0].ncols(), y_tilde[0].ncols())?;
    let mut tape = Tape::new();
    let h = tape.constant(stack(h_hat)?);
    let p = mapper.bind(&mut tape, false);
    let l = distill_on_tape(&mut tape, h, &p, stack(y_tilde)?);
    Ok(tape.scalar(l))
}

/// Online state initialized from `original`, plus the same encoder frozen as teacher.
pub fn regularize_setup(
    original: &OnlineState,
    layer: Option<usize>,
    n_mels: usize,
) -> Result<(OnlineState, EncoderTeacher)> {
    let teacher = EncoderTeacher::new(TargetState::from_online(original), layer, n_mels)?;
    Ok((original.clone(), teacher))
}

/// Teacher features for every clean clip, aligned to `frames` rows.
pub fn teacher_targets(
    teacher: &dyn Teacher,
    clean: &[Spectrogram],
    frames: usize,
    observer: &mut dyn StepObserver,
) -> Result<Vec<Mat>> {
    clean
        .iter()
        .enumerate()
        .map(|(b, spec)| {
            observer.teacher_input(b, spec);
            align_frames(&teacher.features(spec)?, frames)
        })
        .collect()
}

/// Output width of the mapper for a scenario.
pub fn mapper_out_dim(cfg: &OfflineConfig, teacher: Option<&dyn Teacher>) -> Result<usize> {
    match cfg.scenario {
        Scenario::Supervised => cfg
            .n_classes
            .ok_or_else(|| M2dError::config("offline.n_classes", "required for supervised scenario")),
        Scenario::Distill | Scenario::Regularize => teacher
            .map(|t| t.feature_dim())
            .ok_or_else(|| M2dError::config("offline.teacher", "required for this scenario")),
    }
}

/// M2D trainer plus the offline branch.
#[derive(Clone)]
pub struct M2dxTrainer {
    pub core: M2dTrainer,
    pub cfg: OfflineConfig,
    pub mapper: ParamStore,
    pub teacher: Option<Arc<dyn Teacher>>,
}

/// Loss values and gradients of one M2D-X batch.
pub struct M2dxGrads {
    pub loss_m2d: f64,
    pub loss_off: f64,
    pub loss_total: f64,
    pub online: IndexMap<String, Mat>,
    pub target: IndexMap<String, Mat>,
    pub mapper: IndexMap<String, Mat>,
}

impl M2dxTrainer {
    pub fn new(core: M2dTrainer, cfg: OfflineConfig, mapper: ParamStore, teacher: Option<Arc<dyn Teacher>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.scenario != Scenario::Supervised && teacher.is_none() {
            return Err(M2dError::config("offline.teacher", "teacher handle missing"));
        }
        Ok(Self {
            core,
            cfg,
            mapper,
            teacher,
        })
    }

    /// Losses and gradients for one batch without touching any parameter.
    pub fn loss_and_grads(
        &self,
        batch: &OfflineBatch,
        plans: &[MaskPlan],
        observer: &mut dyn StepObserver,
    ) -> Result<M2dxGrads> {
        batch.check(&self.cfg)?;
        let mut g = build_m2d_graph(
            &self.core.online,
            &self.core.target,
            &batch.x_noisy,
            plans,
            self.core.opts,
            observer,
        )?;
        let grid = g.grid;
        let items = batch.x_noisy.len();
        let h = assemble_on_tape(&mut g.tape, g.z_v, g.z_hat, plans, &grid);
        let mp = self.mapper.bind(&mut g.tape, true);
        let loss_off = match self.cfg.scenario {
            Scenario::Supervised => {
                let labels = batch.y_label.as_ref().expect("checked");
                check_mapper(&self.mapper, g.tape.value(h).ncols(), labels.ncols())?;
                supervised_on_tape(&mut g.tape, h, items, grid.n_t, &mp, labels)
            }
            Scenario::Distill | Scenario::Regularize => {
                let teacher = self.teacher.as_deref().expect("validated");
                let clean = batch.y_audio.as_ref().expect("checked");
                let targets = teacher_targets(teacher, clean, grid.n_t, observer)?;
                check_mapper(&self.mapper, g.tape.value(h).ncols(), teacher.feature_dim())?;
                distill_on_tape(&mut g.tape, h, &mp, stack(&targets)?)
            }
        };
        let total = g
            .tape
            .weighted_sum(&[(g.loss, self.cfg.lambda_m2d), (loss_off, self.cfg.lambda_off)]);
        let grads = g.tape.backward(total);
        Ok(M2dxGrads {
            loss_m2d: g.tape.scalar(g.loss),
            loss_off: g.tape.scalar(loss_off),
            loss_total: g.tape.scalar(total),
            online: grads_by_name(&g.online, &grads),
            target: grads_by_name(&g.target, &grads),
            mapper: grads_by_name(&mp, &grads),
        })
    }

    /// One optimizer step over one or more micro-batches.
    pub fn train_step(
        &mut self,
        micro: &[(&OfflineBatch, &[MaskPlan])],
        observer: &mut dyn StepObserver,
    ) -> Result<TrainStepReport> {
        if micro.is_empty() {
            return Err(M2dError::EmptyBatch("no micro-batches".into()));
        }
        let w = 1.0 / micro.len() as f64;
        let (mut on, mut mp) = (IndexMap::new(), IndexMap::new());
        let (mut l_m2d, mut l_off, mut l_tot) = (0.0, 0.0, 0.0);
        for (batch, plans) in micro {
            let g = self.loss_and_grads(batch, plans, observer)?;
            l_m2d += w * g.loss_m2d;
            l_off += w * g.loss_off;
            l_tot += w * g.loss_total;
            add_scaled(&mut on, g.online, w);
            add_scaled(&mut mp, g.mapper, w);
        }
        self.core.check_loss(l_m2d, l_tot)?;
        let (lr, tau) = self.core.apply_update(&on, Some((&mut self.mapper, &mp)))?;
        Ok(TrainStepReport {
            step: self.core.step,
            loss_m2d: l_m2d,
            loss_off: l_off,
            loss_total: l_tot,
            tau_used: tau,
            lr,
        })
    }
}

/// Parses `clip_id<TAB or space>i,j,k` label lines into multi-hot rows.
pub fn parse_label_lines(text: &str, n_classes: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, |c: char| c == '\t' || c == ' ');
        let id = parts.next().unwrap_or_default().to_string();
        let classes = parts.next().unwrap_or("").trim();
        let idx = classes
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&c| c < n_classes)
                    .ok_or_else(|| M2dError::Data(format!("label line {}: bad class `{s}`", ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id, idx));
    }
    Ok(out)
}

pub fn multi_hot(rows: &[Vec<usize>], n_classes: usize) -> Mat {
    let mut m = Mat::zeros((rows.len(), n_classes));
    for (i, r) in rows.iter().enumerate() {
        for &c in r {
            m[[i, c]] = 1.0;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn combined_examples() {
        let mut cfg = OfflineConfig::preset("speech").unwrap();
        cfg.lambda_off = 0.5;
        assert_eq!(combined_loss(2.0, 4.0, &cfg), 4.0);
        cfg.lambda_off = 0.0;
        assert_eq!(combined_loss(2.0, 4.0, &cfg), 2.0);
        cfg.lambda_m2d = 0.0;
        cfg.lambda_off = 1.0;
        assert_eq!(combined_loss(2.0, 4.0, &cfg), 4.0);
    }

    #[test]
    fn config_validation() {
        let mut c = OfflineConfig::preset("audioset").unwrap();
        assert!(c.validate().is_err());
        c.n_classes = Some(5);
        c.validate().unwrap();
        let mut d = OfflineConfig::preset("speech").unwrap();
        assert!(d.validate().is_err());
        d.teacher = Some("random".into());
        d.validate().unwrap();
        d.lambda_m2d = 0.0;
        d.lambda_off = 0.0;
        assert!(d.validate().is_err());
        assert!(OfflineConfig::preset("nope").is_err());
    }

    #[test]
    fn bce_closed_form() {
        let mut mapper = ParamStore::new();
        mapper.insert("mapper.weight", Mat::zeros((3, 2)));
        mapper.insert("mapper.bias", Mat::zeros((1, 2)));
        let h = vec![Mat::ones((4, 3))];
        let l = offline_supervised_loss(&h, &array![[1.0, 0.0]], &mapper).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(offline_supervised_loss(&h, &array![[1.0, 0.0, 1.0]], &mapper).is_err());
    }

    #[test]
    fn distill_alignment_error() {
        let mut mapper = ParamStore::new();
        mapper.insert("mapper.weight", Mat::eye(2));
        mapper.insert("mapper.bias", Mat::zeros((1, 2)));
        let s = vec![Mat::ones((3, 2))];
        let t = vec![Mat::ones((4, 2))];
        assert!(matches!(offline_distill_loss(&s, &t, &mapper), Err(M2dError::Alignment(_))));
        assert!(offline_distill_loss(&s, &s, &mapper).unwrap().abs() < 1e-12);
        let neg = vec![-Mat::ones((3, 2))];
        assert!((offline_distill_loss(&s, &neg, &mapper).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn frame_alignment() {
        let m = Mat::from_shape_fn((4, 1), |(i, _)| i as f64);
        assert_eq!(align_frames(&m, 4).unwrap(), m);
        let half = align_frames(&m, 2).unwrap();
        assert_eq!(half.column(0).to_vec(), vec![0.5, 2.5]);
        assert!(align_frames(&m, 0).is_err());
    }

    #[test]
    fn labels() {
        let rows = parse_label_lines("a\t0,2\n# c\nb 1\n", 3).unwrap();
        assert_eq!(rows[0], ("a".to_string(), vec![0, 2]));
        assert_eq!(rows[1], ("b".to_string(), vec![1]));
        assert!(parse_label_lines("a\t7", 3).is_err());
        let mh = multi_hot(&[vec![0, 2], vec![1]], 3);
        assert_eq!(mh, array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn least_squares_fit_is_exact_when_underdetermined() {
        let x = Mat::from_shape_fn((3, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let y = Mat::from_shape_fn((3, 2), |(i, j)| (i + j) as f64);
        let p = fit_mapper_least_squares(&x, &y).unwrap();
        let pred = x.dot(p.expect("mapper.weight")) + p.expect("mapper.bias");
        assert!(pred.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    fn tiny() -> (M2dTrainer, Vec<Spectrogram>, Vec<MaskPlan>) {
        use crate::audio::MelConfig;
        use crate::networks::{EncoderConfig, PredictorConfig};
        use crate::nn::optim::{AdamW, LrSchedule, OptimConfig};
        use crate::patching::sample_mask;
        use crate::training::{ForwardOptions, TauSchedule};
        let enc = EncoderConfig { depth: 1, dim: 8, heads: 2, mlp_ratio: 2.0, patch_f: 2, patch_t: 2 };
        let pred = PredictorConfig { depth: 1, dim: Some(4), heads: 2, mlp_ratio: 2.0 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let online = OnlineState::init(enc, pred, &mut rng).unwrap();
        let cfg = MelConfig { n_mels: 4, ..Default::default() };
        let specs: Vec<Spectrogram> = (0..2)
            .map(|_| Spectrogram::new(Mat::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0)), cfg).unwrap())
            .collect();
        let plans = (0..2).map(|_| sample_mask(6, 0.5, &mut rng).unwrap()).collect();
        let oc = OptimConfig::default();
        let tau = TauSchedule { total_steps: 10, ..Default::default() };
        let t = M2dTrainer::new(online, AdamW::new(&oc), LrSchedule::new(&oc, 256, 10), tau, ForwardOptions::default());
        (t, specs, plans)
    }

    #[test]
    fn feature_assembly_matches_value_path() {
        let (t, specs, plans) = tiny();
        let h = assemble_batch_features(&t.online, &specs, &plans).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].dim(), (3, 16));
        let cfg = &t.online.encoder;
        let (grid, patches) = patchify(&specs[1], cfg.patch_f, cfg.patch_t).unwrap();
        let pe = make_positional_encoding(&grid, cfg.dim).unwrap();
        let z_v = encode_patches(&t.online, &patches, &plans[1].visible, &pe, usize::MAX).unwrap();
        let z_hat = crate::networks::predict(&t.online, &z_v, &plans[1], &pe).unwrap();
        let z_hat_m = crate::networks::filter_masked(&z_hat, &plans[1]).unwrap();
        let expect = assemble_audio_feature(&z_v, &z_hat_m, &plans[1], &grid).unwrap();
        assert!(h[1].iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(assemble_audio_feature(&z_v, &z_v, &plans[1], &grid).is_err());
    }

    #[test]
    fn mapper_gradient_scales_with_lambda() {
        let (core, specs, plans) = tiny();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mapper = init_mapper(16, 3, &mut rng);
        let labels = multi_hot(&[vec![0], vec![1, 2]], 3);
        let batch = OfflineBatch { x_noisy: specs, y_audio: None, y_label: Some(labels) };
        let mut cfg = OfflineConfig::preset("audioset").unwrap();
        cfg.n_classes = Some(3);
        let full = M2dxTrainer::new(core.clone(), cfg.clone(), mapper.clone(), None).unwrap();
        cfg.lambda_off = 0.5;
        let half = M2dxTrainer::new(core, cfg, mapper, None).unwrap();
        let a = full.loss_and_grads(&batch, &plans, &mut crate::training::NoObserver).unwrap();
        let b = half.loss_and_grads(&batch, &plans, &mut crate::training::NoObserver).unwrap();
        assert!((a.loss_off - b.loss_off).abs() < 1e-12);
        for (ga, gb) in a.mapper.values().zip(b.mapper.values()) {
            assert!(ga.iter().zip(gb.iter()).all(|(x, y)| (x * 0.5 - y).abs() < 1e-12));
        }
        assert!(a.target.values().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn teacher_scenarios_step() {
        let (core, specs, plans) = tiny();
        let (online, teacher) = regularize_setup(&core.online, None, 4).unwrap();
        assert_eq!(teacher.feature_dim(), 16);
        let teacher: Arc<dyn Teacher> = Arc::new(teacher);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mapper = init_mapper(16, 16, &mut rng);
        let mut cfg = OfflineConfig::preset("further").unwrap();
        cfg.teacher = Some("original".into());
        let mut core = core;
        core.online = online;
        let mut tr = M2dxTrainer::new(core, cfg, mapper.clone(), Some(teacher)).unwrap();
        let batch = OfflineBatch { x_noisy: specs.clone(), y_audio: Some(specs), y_label: None };
        let r = tr.train_step(&[(&batch, &plans)], &mut crate::training::NoObserver).unwrap();
        assert_eq!(r.step, 1);
        assert!((r.loss_total - (r.loss_m2d + r.loss_off)).abs() < 1e-12);
        assert_ne!(tr.mapper, mapper);
        assert_eq!(tr.core.optimizer.t, 1);
    }
}
