//! One M2D training step: the online branch encodes visible patches and
//! predicts the masked ones, the target branch encodes the masked patches,
//! and the loss between the two updates the online weights while the target
//! follows by EMA.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{M2dError, Result};
use crate::networks::{
    ema_update, encode_patches_on_tape, gather_patch_rows, predict_on_tape, standardize_rows, OnlineState,
    TargetNorm, TargetState,
};
use crate::nn::optim::{AdamW, LrSchedule};
use crate::nn::tape::cosine_terms;
use crate::nn::{Bound, Gradients, Mat, ParamStore, Tape, Var};
use crate::patching::{make_positional_encoding, patchify, MaskPlan, PatchGrid, TokenSequence};

/// Upper bound of the M2D loss plus slack; anything above means divergence.
pub const LOSS_GUARD: f64 = 4.0 + 1e-3;

/// Which patches the target encoder receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Masked patches only.
    #[default]
    M2d,
    /// Every patch; masked rows are selected after encoding.
    AllPatchesToTarget,
}

/// Linear EMA decay schedule over training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: u64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            tau_start: 0.99995,
            tau_end: 0.99999,
            total_steps: 1,
        }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_start && self.tau_start <= self.tau_end && self.tau_end <= 1.0) {
            return Err(M2dError::config(
                "schedule.tau_start",
                format!("need 0 <= tau_start <= tau_end <= 1, got {} .. {}", self.tau_start, self.tau_end),
            ));
        }
        if self.total_steps == 0 {
            return Err(M2dError::config("schedule.total_steps", "must be positive"));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(M2dError::Domain(format!(
                "step {step} is outside the schedule of {} steps",
                self.total_steps
            )));
        }
        Ok(self.tau_start + (self.tau_end - self.tau_start) * step as f64 / self.total_steps as f64)
    }
}

/// Mean over token pairs of `2 - 2 cos(u, v)`.
pub fn m2d_loss(z_hat_m: &TokenSequence, z_tilde_m: &TokenSequence) -> Result<f64> {
    if z_hat_m.is_empty() {
        return Err(M2dError::EmptyBatch("no masked tokens to score".into()));
    }
    if z_hat_m.tokens.dim() != z_tilde_m.tokens.dim() {
        return Err(M2dError::Dimension(format!(
            "prediction {:?} vs target {:?}",
            z_hat_m.tokens.dim(),
            z_tilde_m.tokens.dim()
        )));
    }
    let terms = cosine_terms(z_hat_m.tokens.view(), z_tilde_m.tokens.view());
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub loss_m2d: f64,
    pub loss_off: f64,
    pub loss_total: f64,
    pub tau_used: f64,
    pub lr: f64,
}

/// Sees exactly what each branch reads during a step.
pub trait StepObserver {
    fn online_input(&mut self, _item: usize, _positions: &[usize], _patches: &Mat) {}
    fn target_input(&mut self, _item: usize, _positions: &[usize], _patches: &Mat) {}
    fn teacher_input(&mut self, _item: usize, _spec: &Spectrogram) {}
}

/// Observer that ignores everything.
pub struct NoObserver;
impl StepObserver for NoObserver {}

/// Counts tokens entering each branch.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct TokenCounter {
    pub online_tokens: usize,
    pub target_tokens: usize,
    pub teacher_items: usize,
}

impl StepObserver for TokenCounter {
    fn online_input(&mut self, _item: usize, positions: &[usize], _patches: &Mat) {
        self.online_tokens += positions.len();
    }
    fn target_input(&mut self, _item: usize, positions: &[usize], _patches: &Mat) {
        self.target_tokens += positions.len();
    }
    fn teacher_input(&mut self, _item: usize, _spec: &Spectrogram) {
        self.teacher_items += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    pub variant: Variant,
    pub target_norm: TargetNorm,
}

/// Everything recorded by one M2D forward pass over a batch.
pub struct M2dGraph {
    pub tape: Tape,
    pub online: Bound,
    pub target: Bound,
    pub grid: PatchGrid,
    pub plans: Vec<MaskPlan>,
    /// Visible encodings of every item, stacked in plan order.
    pub z_v: Var,
    /// Predictions at every position, `N` rows per item.
    pub z_hat: Var,
    pub z_hat_m: Var,
    pub z_tilde_m: Var,
    pub loss: Var,
}

/// Patchifies a batch of equally shaped spectrograms.
pub fn patchify_batch(batch: &[Spectrogram], patch_f: usize, patch_t: usize) -> Result<(PatchGrid, Vec<Mat>)> {
    let first = batch
        .first()
        .ok_or_else(|| M2dError::EmptyBatch("batch has no items".into()))?;
    let (grid, _) = patchify(first, patch_f, patch_t)?;
    let mut out = Vec::with_capacity(batch.len());
    for spec in batch {
        let (g, p) = patchify(spec, patch_f, patch_t)?;
        if g != grid {
            return Err(M2dError::Dimension(format!("batch items tile differently: {g:?} vs {grid:?}")));
        }
        out.push(p);
    }
    Ok((grid, out))
}

/// Records the full M2D forward pass for a batch.
pub fn build_m2d_graph(
    online: &OnlineState,
    target: &TargetState,
    batch: &[Spectrogram],
    plans: &[MaskPlan],
    opts: ForwardOptions,
    observer: &mut dyn StepObserver,
) -> Result<M2dGraph> {
    let cfg = &online.encoder;
    let (grid, patches) = patchify_batch(batch, cfg.patch_f, cfg.patch_t)?;
    if plans.len() != batch.len() {
        return Err(M2dError::Consistency(format!(
            "{} mask plans for {} batch items",
            plans.len(),
            batch.len()
        )));
    }
    let n = grid.n_patches();
    for plan in plans {
        plan.check(n)?;
        if plan.masked.is_empty() {
            return Err(M2dError::EmptyBatch("a plan masks no patches".into()));
        }
    }
    let pe = make_positional_encoding(&grid, cfg.dim)?;
    let mut tape = Tape::new();
    let on = online.params.bind(&mut tape, true);
    let tg = target.params.bind(&mut tape, true);

    // Online branch: visible patches only.
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    for (b, (p, pos)) in patches.iter().zip(&visible).enumerate() {
        observer.online_input(b, pos, &p.select(ndarray::Axis(0), pos));
    }
    let rows = gather_patch_rows(&patches, &visible);
    let (z_v, _) = encode_patches_on_tape(&mut tape, &on, cfg, rows, &visible, &pe, usize::MAX);
    let z_hat = predict_on_tape(&mut tape, &on, online, z_v, plans, &pe);
    let masked_rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked.iter().map(move |&m| b * n + m))
        .collect();
    let z_hat_m = tape.gather_rows(z_hat, masked_rows.clone());

    // Target branch.
    let target_positions: Vec<Vec<usize>> = match opts.variant {
        Variant::M2d => plans.iter().map(|p| p.masked.clone()).collect(),
        Variant::AllPatchesToTarget => plans.iter().map(|_| (0..n).collect()).collect(),
    };
    for (b, (p, pos)) in patches.iter().zip(&target_positions).enumerate() {
        observer.target_input(b, pos, &p.select(ndarray::Axis(0), pos));
    }
    let rows = gather_patch_rows(&patches, &target_positions);
    let (z_t, _) = encode_patches_on_tape(&mut tape, &tg, &target.encoder, rows, &target_positions, &pe, usize::MAX);
    let z_m = match opts.variant {
        Variant::M2d => z_t,
        Variant::AllPatchesToTarget => tape.gather_rows(z_t, masked_rows),
    };
    let z_m = tape.detach(z_m);
    let z_tilde_m = tape.constant(standardize_rows(tape.value(z_m), opts.target_norm));
    let loss = tape.cosine_loss(z_hat_m, z_tilde_m);
    Ok(M2dGraph {
        tape,
        online: on,
        target: tg,
        grid,
        plans: plans.to_vec(),
        z_v,
        z_hat,
        z_hat_m,
        z_tilde_m,
        loss,
    })
}

/// Gradient of every bound parameter, zeros where none arrived.
pub fn grads_by_name(bound: &Bound, grads: &Gradients) -> IndexMap<String, Mat> {
    bound
        .iter()
        .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
        .collect()
}

/// Loss and gradients with respect to online and target parameters.
pub fn m2d_loss_and_grads(
    online: &OnlineState,
    target: &TargetState,
    batch: &[Spectrogram],
    plans: &[MaskPlan],
    opts: ForwardOptions,
) -> Result<(f64, IndexMap<String, Mat>, IndexMap<String, Mat>)> {
    let g = build_m2d_graph(online, target, batch, plans, opts, &mut NoObserver)?;
    let grads = g.tape.backward(g.loss);
    Ok((
        g.tape.scalar(g.loss),
        grads_by_name(&g.online, &grads),
        grads_by_name(&g.target, &grads),
    ))
}

pub(crate) fn add_scaled(acc: &mut IndexMap<String, Mat>, grads: IndexMap<String, Mat>, w: f64) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.scaled_add(w, &g),
            None => {
                acc.insert(k, g * w);
            }
        }
    }
}

/// One micro-batch: spectrograms and their mask plans.
#[derive(Debug, Clone, Copy)]
pub struct MicroBatch<'a> {
    pub specs: &'a [Spectrogram],
    pub plans: &'a [MaskPlan],
}

/// Online and target networks with their optimizer and schedules.
#[derive(Debug, Clone)]
pub struct M2dTrainer {
    pub online: OnlineState,
    pub target: TargetState,
    pub optimizer: AdamW,
    pub lr: LrSchedule,
    pub tau: TauSchedule,
    pub opts: ForwardOptions,
    /// Completed optimizer steps.
    pub step: u64,
}

impl M2dTrainer {
    pub fn new(online: OnlineState, optimizer: AdamW, lr: LrSchedule, tau: TauSchedule, opts: ForwardOptions) -> Self {
        let target = TargetState::from_online(&online);
        Self {
            online,
            target,
            optimizer,
            lr,
            tau,
            opts,
            step: 0,
        }
    }

    pub(crate) fn check_loss(&self, loss_m2d: f64, loss_total: f64) -> Result<()> {
        if !loss_m2d.is_finite() || !loss_total.is_finite() || loss_m2d > LOSS_GUARD {
            return Err(M2dError::Divergence {
                step: self.step + 1,
                loss: if loss_m2d.is_finite() { loss_total } else { loss_m2d },
            });
        }
        Ok(())
    }

    /// Gradient step on the online weights, then EMA of the target with
    /// `tau_at(step)`. Returns `(lr, tau)`.
    pub(crate) fn apply_update(
        &mut self,
        grads: &IndexMap<String, Mat>,
        extra: Option<(&mut ParamStore, &IndexMap<String, Mat>)>,
    ) -> Result<(f64, f64)> {
        let lr = self.lr.at(self.step);
        let tau = self.tau.tau_at(self.step.min(self.tau.total_steps))?;
        self.optimizer.begin_step();
        self.optimizer.apply(&mut self.online.params, grads, lr);
        if let Some((store, g)) = extra {
            self.optimizer.apply(store, g, lr);
        }
        if !self.online.params.all_finite() {
            return Err(M2dError::Divergence {
                step: self.step + 1,
                loss: f64::NAN,
            });
        }
        ema_update(&mut self.target, &self.online, tau)?;
        self.step += 1;
        Ok((lr, tau))
    }

    /// One optimizer step over one or more micro-batches whose gradients are averaged.
    pub fn train_step(&mut self, micro: &[MicroBatch<'_>], observer: &mut dyn StepObserver) -> Result<TrainStepReport> {
        if micro.is_empty() {
            return Err(M2dError::EmptyBatch("no micro-batches".into()));
        }
        let w = 1.0 / micro.len() as f64;
        let mut grads = IndexMap::new();
        let mut loss = 0.0;
        for mb in micro {
            let g = build_m2d_graph(&self.online, &self.target, mb.specs, mb.plans, self.opts, observer)?;
            let back = g.tape.backward(g.loss);
            loss += w * g.tape.scalar(g.loss);
            add_scaled(&mut grads, grads_by_name(&g.online, &back), w);
        }
        self.check_loss(loss, loss)?;
        let (lr, tau) = self.apply_update(&grads, None)?;
        Ok(TrainStepReport {
            step: self.step,
            loss_m2d: loss,
            loss_off: 0.0,
            loss_total: loss,
            tau_used: tau,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::networks::{EncoderConfig, PredictorConfig};
    use crate::nn::optim::OptimConfig;
    use crate::patching::sample_mask;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_endpoints() {
        let a = TokenSequence::new(array![[1.0, 2.0], [0.0, 3.0]], vec![0, 1]).unwrap();
        assert!(m2d_loss(&a, &a).unwrap().abs() < 1e-12);
        let neg = TokenSequence::new(-&a.tokens, vec![0, 1]).unwrap();
        assert!((m2d_loss(&a, &neg).unwrap() - 4.0).abs() < 1e-12);
        let o1 = TokenSequence::new(array![[1.0, 0.0]], vec![0]).unwrap();
        let o2 = TokenSequence::new(array![[0.0, 5.0]], vec![0]).unwrap();
        assert!((m2d_loss(&o1, &o2).unwrap() - 2.0).abs() < 1e-12);
        let empty = TokenSequence::new(Mat::zeros((0, 2)), vec![]).unwrap();
        assert!(matches!(m2d_loss(&empty, &empty), Err(M2dError::EmptyBatch(_))));
    }

    #[test]
    fn tau_schedule() {
        let s = TauSchedule {
            total_steps: 1000,
            ..Default::default()
        };
        assert_eq!(s.tau_at(0).unwrap(), 0.99995);
        assert!((s.tau_at(1000).unwrap() - 0.99999).abs() < 1e-15);
        assert!((s.tau_at(500).unwrap() - 0.99997).abs() < 1e-15);
        assert!(matches!(s.tau_at(1001), Err(M2dError::Domain(_))));
        let bad = TauSchedule {
            tau_start: 0.9,
            tau_end: 0.8,
            total_steps: 1,
        };
        assert!(bad.validate().is_err());
    }

    fn tiny_setup(seed: u64) -> (OnlineState, Vec<Spectrogram>, Vec<MaskPlan>) {
        let enc = EncoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_f: 2,
            patch_t: 2,
        };
        let pred = PredictorConfig {
            depth: 1,
            dim: Some(4),
            heads: 2,
            mlp_ratio: 2.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = OnlineState::init(enc, pred, &mut rng).unwrap();
        let cfg = MelConfig { n_mels: 4, ..Default::default() };
        let batch: Vec<Spectrogram> = (0..2)
            .map(|_| Spectrogram::new(Mat::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0)), cfg).unwrap())
            .collect();
        let plans = (0..2).map(|_| sample_mask(6, 0.5, &mut rng).unwrap()).collect();
        (online, batch, plans)
    }

    #[test]
    fn target_gradients_are_zero() {
        let (online, batch, plans) = tiny_setup(3);
        let target = TargetState::from_online(&online);
        let (loss, g_on, g_tg) = m2d_loss_and_grads(&online, &target, &batch, &plans, ForwardOptions::default()).unwrap();
        assert!((0.0..=4.0).contains(&loss));
        assert!(g_tg.values().all(|g| g.iter().all(|&v| v == 0.0)));
        assert!(g_on.values().any(|g| g.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn token_counts_per_variant() {
        let (online, batch, plans) = tiny_setup(4);
        let target = TargetState::from_online(&online);
        for (variant, expect) in [(Variant::M2d, 6), (Variant::AllPatchesToTarget, 12)] {
            let mut c = TokenCounter::default();
            let opts = ForwardOptions { variant, ..Default::default() };
            build_m2d_graph(&online, &target, &batch, &plans, opts, &mut c).unwrap();
            assert_eq!(c.target_tokens, expect);
            assert_eq!(c.online_tokens, 6);
        }
    }

    #[test]
    fn step_applies_ema() {
        let (online, batch, plans) = tiny_setup(5);
        let tau = TauSchedule {
            tau_start: 0.5,
            tau_end: 0.5,
            total_steps: 10,
        };
        let cfg = OptimConfig::default();
        let mut t = M2dTrainer::new(
            online,
            AdamW::new(&cfg),
            LrSchedule::new(&cfg, 256, 10),
            tau,
            ForwardOptions::default(),
        );
        let old_target = t.target.clone();
        let r = t
            .train_step(&[MicroBatch { specs: &batch, plans: &plans }], &mut NoObserver)
            .unwrap();
        assert_eq!(r.step, 1);
        assert_eq!(r.tau_used, 0.5);
        let new_online = t.online.encoder_params();
        for ((_, tn), ((_, to), (_, on))) in t.target.params.iter().zip(old_target.params.iter().zip(new_online.iter())) {
            let expect = to * 0.5 + on * 0.5;
            assert!(tn.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }
}
