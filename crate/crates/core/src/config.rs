//! Run configuration. A run is described by one TOML file; unknown keys are
//! rejected. Values resolve in three layers: built-in defaults, then the
//! optional `preset`, then whatever the file sets explicitly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{DatasetStats, MelConfig};
use crate::error::{M2dError, Result};
use crate::eval::{ProbeConfig, SynthTask};
use crate::networks::{EncoderConfig, PredictorConfig, TargetNorm};
use crate::nn::optim::OptimConfig;
use crate::offline::OfflineConfig;
use crate::training::{TauSchedule, Variant};

/// Either a named preset (`audioset`, `identity`, `estimate`) or explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StatsConfig {
    Named(String),
    Values(DatasetStats),
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig::Named("audioset".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauConfig {
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for TauConfig {
    fn default() -> Self {
        let d = TauSchedule::default();
        Self {
            tau_start: d.tau_start,
            tau_end: d.tau_end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub snr_db: (f64, f64),
    pub gain: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        let t = SynthTask::default();
        Self {
            n_classes: t.n_classes,
            clips_per_class: t.clips_per_class,
            duration_s: t.duration_s,
            snr_db: t.snr_db,
            gain: t.gain,
        }
    }
}

impl SynthConfig {
    pub fn task(&self) -> SynthTask {
        SynthTask {
            snr_db: self.snr_db,
            gain: self.gain,
            ..SynthTask::with_classes(self.n_classes, self.clips_per_class, self.duration_s)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthConfig,
    /// Text file with one WAV path per line (relative paths resolve against the list's directory).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_list: Option<PathBuf>,
    /// WAV list used as background noise by M2D-X.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background_list: Option<PathBuf>,
    /// Label file: `clip_id<TAB>i,j,k` per line, clip id being the WAV file stem.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub mel: MelConfig,
    pub stats: StatsConfig,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub mask_ratio: f64,
    pub variant: Variant,
    pub target_norm: TargetNorm,
    /// Model input length in frames; clips are cropped or padded to it.
    pub clip_frames: usize,
    pub optimizer: OptimConfig,
    pub schedule: TauConfig,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    /// Samples per epoch, reached by replicating the data list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub virtual_epoch_samples: Option<usize>,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Record elapsed seconds in the metrics; off keeps metrics byte-reproducible.
    pub log_wall_time: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offline: Option<OfflineConfig>,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub probe_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: None,
            mel: MelConfig::default(),
            stats: StatsConfig::default(),
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            mask_ratio: 0.7,
            variant: Variant::M2d,
            target_norm: TargetNorm::PerToken,
            clip_frames: 192,
            optimizer: OptimConfig::default(),
            schedule: TauConfig::default(),
            epochs: 10,
            steps: None,
            batch_size: 16,
            grad_accum_steps: 1,
            virtual_epoch_samples: None,
            checkpoint_every: 0,
            log_wall_time: false,
            offline: None,
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
            probe_seeds: vec![0, 1, 2],
        }
    }
}

fn preset_overlay(name: &str) -> Result<toml::Table> {
    let text = match name {
        "audioset" => {
            r#"
            mask_ratio = 0.7
            [offline]
            scenario = "supervised"
            lambda_m2d = 1.0
            lambda_off = 1.0
            eta = 0.0
            "#
        }
        "speech" => {
            r#"
            mask_ratio = 0.6
            [encoder]
            patch_f = 80
            patch_t = 2
            [offline]
            scenario = "distill"
            lambda_m2d = 1.0
            lambda_off = 0.5
            eta = 0.2
            "#
        }
        "further" => {
            r#"
            mask_ratio = 0.7
            grad_accum_steps = 2
            [offline]
            scenario = "regularize"
            lambda_m2d = 1.0
            lambda_off = 1.0
            eta = 0.3
            "#
        }
        other => return Err(M2dError::config("preset", format!("unknown preset `{other}`"))),
    };
    Ok(toml::from_str(text).expect("preset tables parse"))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Field path of a TOML deserialization error, best effort.
fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| M2dError::config(toml_field(&e), e.message().to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(p) = user.get("preset") {
            let name = p
                .as_str()
                .ok_or_else(|| M2dError::config("preset", "must be a string"))?;
            merge(&mut base, preset_overlay(name)?);
        }
        merge(&mut base, user);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| M2dError::config(toml_field(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| M2dError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.encoder.validate()?;
        self.predictor.validate(self.encoder.dim)?;
        self.optimizer_checks()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(M2dError::config("mask_ratio", format!("must lie in (0, 1), got {}", self.mask_ratio)));
        }
        if self.grad_accum_steps == 0 {
            return Err(M2dError::config("grad_accum_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(M2dError::config("batch_size", "must be at least 1"));
        }
        if self.clip_frames == 0 || self.clip_frames % self.encoder.patch_t != 0 {
            return Err(M2dError::config(
                "clip_frames",
                format!("{} is not a positive multiple of patch_t {}", self.clip_frames, self.encoder.patch_t),
            ));
        }
        if self.mel.n_mels % self.encoder.patch_f != 0 {
            return Err(M2dError::config(
                "encoder.patch_f",
                format!("{} mel bins do not tile by {}", self.mel.n_mels, self.encoder.patch_f),
            ));
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(M2dError::config("epochs", "training needs at least one step"));
        }
        if self.virtual_epoch_samples == Some(0) {
            return Err(M2dError::config("virtual_epoch_samples", "must be positive"));
        }
        TauSchedule {
            tau_start: self.schedule.tau_start,
            tau_end: self.schedule.tau_end,
            total_steps: 1,
        }
        .validate()?;
        if let StatsConfig::Named(n) = &self.stats {
            if n != "estimate" {
                DatasetStats::preset(n)?;
            }
        }
        if let StatsConfig::Values(v) = &self.stats {
            DatasetStats::new(v.mean, v.std)?;
        }
        if let Some(off) = &self.offline {
            off.validate()?;
        }
        if self.data.source == DataSource::Files && self.data.train_list.is_none() {
            return Err(M2dError::config("data.train_list", "required when data.source = \"files\""));
        }
        if self.data.source == DataSource::Synth {
            self.data.synth.task().validate()?;
        }
        if self.probe_seeds.is_empty() {
            return Err(M2dError::config("probe_seeds", "need at least one seed"));
        }
        Ok(())
    }

    fn optimizer_checks(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.base_lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(M2dError::config("optimizer", "base_lr must be positive and betas in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.warmup_fraction) || o.weight_decay < 0.0 {
            return Err(M2dError::config("optimizer.warmup_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    /// Samples counted as one epoch for a dataset of `n_items`.
    pub fn epoch_samples(&self, n_items: usize) -> usize {
        self.virtual_epoch_samples.unwrap_or(n_items)
    }

    pub fn total_steps(&self, n_items: usize) -> u64 {
        self.steps.unwrap_or_else(|| {
            let per_epoch = (self.epoch_samples(n_items) / self.effective_batch()).max(1);
            (per_epoch * self.epochs) as u64
        })
    }

    pub fn tau_schedule(&self, total_steps: u64) -> TauSchedule {
        TauSchedule {
            tau_start: self.schedule.tau_start,
            tau_end: self.schedule.tau_end,
            total_steps,
        }
    }

    /// Offline section or a config error; checked before any compute.
    pub fn require_offline(&self) -> Result<&OfflineConfig> {
        self.offline
            .as_ref()
            .ok_or_else(|| M2dError::config("offline", "pretrain-x needs an [offline] section"))
    }

    /// Stable JSON snapshot used inside checkpoints.
    pub fn snapshot(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| M2dError::Corrupt {
            path: PathBuf::new(),
            reason: format!("config snapshot: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.mask_ratio, 0.7);
        assert_eq!(c.optimizer.base_lr, 3e-4);
        assert_eq!((c.schedule.tau_start, c.schedule.tau_end), (0.99995, 0.99999));
        assert!(c.offline.is_none());
    }

    #[test]
    fn bad_mask_ratio_names_field() {
        match RunConfig::from_toml_str("mask_ratio = 1.5") {
            Err(M2dError::Config { field, .. }) => assert_eq!(field, "mask_ratio"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("mask_ration = 0.5").is_err());
        assert!(RunConfig::from_toml_str("[encoder]\ndepht = 3").is_err());
    }

    #[test]
    fn speech_preset() {
        let c = RunConfig::from_toml_str("preset = \"speech\"\nclip_frames = 100\n[offline]\nteacher = \"random\"").unwrap();
        let off = c.offline.unwrap();
        assert_eq!((off.lambda_off, off.lambda_m2d, off.eta), (0.5, 1.0, 0.2));
        assert_eq!((c.encoder.patch_f, c.encoder.patch_t), (80, 2));
        assert_eq!(c.mask_ratio, 0.6);
    }

    #[test]
    fn explicit_values_beat_preset() {
        let c = RunConfig::from_toml_str(
            "preset = \"further\"\ngrad_accum_steps = 1\n[offline]\nteacher = \"x.m2d\"\neta = 0.1",
        )
        .unwrap();
        assert_eq!(c.grad_accum_steps, 1);
        assert_eq!(c.offline.unwrap().eta, 0.1);
        assert!(RunConfig::from_toml_str("preset = \"nope\"").is_err());
    }

    #[test]
    fn step_counts() {
        let c = RunConfig {
            batch_size: 8,
            grad_accum_steps: 2,
            epochs: 3,
            virtual_epoch_samples: Some(100),
            ..Default::default()
        };
        assert_eq!(c.total_steps(10), 18);
        assert_eq!(RunConfig { steps: Some(7), ..c.clone() }.total_steps(10), 7);
    }

    #[test]
    fn snapshot_round_trip() {
        let c = RunConfig::from_toml_str("preset = \"audioset\"\n[offline]\nn_classes = 4").unwrap();
        assert_eq!(RunConfig::from_snapshot(&c.snapshot()).unwrap(), c);
    }
}
