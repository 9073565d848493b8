//! End-to-end runs: data loading, batch sampling, the training loop with
//! metrics and checkpoints, feature extraction and probing. The CLI is a
//! thin layer over these functions.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, DatasetStats, LogMel, Spectrogram};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{DataSource, RunConfig, StatsConfig};
use crate::error::{M2dError, Result};
use crate::eval::{self, generate_synth, logmels, Comparison, NoiseColor, ProbeResult};
use crate::features_io::{write_manifest, write_tensor, DType, ManifestEntry};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::networks::{OnlineState, TargetState};
use crate::nn::optim::{AdamW, LrSchedule};
use crate::nn::{Mat, ParamStore};
use crate::offline::{
    init_mapper, mapper_out_dim, multi_hot, parse_label_lines, regularize_setup, EncoderTeacher, M2dxTrainer,
    OfflineBatch, Scenario, Teacher,
};
use crate::patching::{sample_mask, MaskPlan, PatchGrid};
use crate::rng::{fork, Stream};
use crate::training::{ForwardOptions, M2dTrainer, MicroBatch, StepObserver, TrainStepReport};
use crate::transfer::{clip_feature, encode_chunked};

/// Raw (unstandardized) log-mels with optional labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub specs: Vec<Spectrogram>,
    pub labels: Option<Vec<Vec<usize>>>,
    pub n_classes: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// First label of every clip, for single-label probing.
    pub fn single_labels(&self) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| M2dError::Data("dataset has no labels".into()))?;
        labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| l.first().copied().ok_or_else(|| M2dError::Data(format!("clip {id} has no label"))))
            .collect()
    }
}

fn read_list(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| M2dError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

fn load_wavs(paths: &[PathBuf], frontend: &LogMel) -> Result<Vec<Spectrogram>> {
    let rate = frontend.config().sample_rate_hz;
    let waves = paths.iter().map(|p| read_wav(p, rate)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = waves.iter().map(|w| w.as_slice()).collect();
    logmels(frontend, &refs)
}

/// Training or evaluation clips described by `cfg.data`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let frontend = LogMel::new(cfg.mel)?;
    match cfg.data.source {
        DataSource::Synth => {
            let task = cfg.data.synth.task();
            if task.sample_rate_hz != cfg.mel.sample_rate_hz {
                return Err(M2dError::config("mel.sample_rate_hz", "synthetic data is generated at 16 kHz"));
            }
            let clips = generate_synth(&task, cfg.seed)?;
            let refs: Vec<&[f64]> = clips.iter().map(|c| c.audio.as_slice()).collect();
            Ok(Dataset {
                ids: clips.iter().map(|c| c.id.clone()).collect(),
                specs: logmels(&frontend, &refs)?,
                labels: Some(clips.iter().map(|c| vec![c.label]).collect()),
                n_classes: Some(task.n_classes),
            })
        }
        DataSource::Files => {
            let list = cfg.data.train_list.as_ref().expect("validated");
            let paths = read_list(list)?;
            if paths.is_empty() {
                return Err(M2dError::Data(format!("{} lists no files", list.display())));
            }
            let ids: Vec<String> = paths
                .iter()
                .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                .collect();
            let specs = load_wavs(&paths, &frontend)?;
            let (labels, n_classes) = match &cfg.data.labels {
                None => (None, None),
                Some(lp) => {
                    let n = cfg
                        .offline
                        .as_ref()
                        .and_then(|o| o.n_classes)
                        .unwrap_or(usize::MAX);
                    let text = std::fs::read_to_string(lp).map_err(|e| M2dError::io(lp, e))?;
                    let rows: HashMap<String, Vec<usize>> = parse_label_lines(&text, n)?.into_iter().collect();
                    let labels = ids
                        .iter()
                        .map(|id| {
                            rows.get(id)
                                .cloned()
                                .ok_or_else(|| M2dError::Data(format!("no label for clip {id}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let seen = labels.iter().flatten().max().map_or(0, |m| m + 1);
                    (Some(labels), Some(if n == usize::MAX { seen } else { n }))
                }
            };
            Ok(Dataset {
                ids,
                specs,
                labels,
                n_classes,
            })
        }
    }
}

/// Background clips for M2D-X noise mixing: the configured WAV list, or
/// synthetic colored noise for synthetic runs.
pub fn load_backgrounds(cfg: &RunConfig, count: usize) -> Result<Vec<Spectrogram>> {
    let frontend = LogMel::new(cfg.mel)?;
    if let Some(list) = &cfg.data.background_list {
        let specs = load_wavs(&read_list(list)?, &frontend)?;
        if specs.is_empty() {
            return Err(M2dError::Data(format!("{} lists no files", list.display())));
        }
        return Ok(specs);
    }
    if cfg.data.source == DataSource::Files {
        return Err(M2dError::config("data.background_list", "needed for noise mixing with file data"));
    }
    let task = cfg.data.synth.task();
    let waves: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            let mut rng = fork(cfg.seed, Stream::Background, i as u64);
            let color = [NoiseColor::White, NoiseColor::Pink, NoiseColor::Brown][rng.random_range(0..3)];
            let mut w = eval::colored_noise(&mut rng, color, task.n_samples());
            let peak = w.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            let gain = rng.random_range(task.gain.0..=task.gain.1) / peak;
            w.iter_mut().for_each(|v| *v *= gain);
            w
        })
        .collect();
    let refs: Vec<&[f64]> = waves.iter().map(|w| w.as_slice()).collect();
    logmels(&frontend, &refs)
}

pub fn resolve_stats(cfg: &RunConfig, data: &Dataset) -> Result<DatasetStats> {
    match &cfg.stats {
        StatsConfig::Named(n) if n == "estimate" => DatasetStats::estimate(&data.specs),
        StatsConfig::Named(n) => DatasetStats::preset(n),
        StatsConfig::Values(v) => DatasetStats::new(v.mean, v.std),
    }
}

/// Epoch-wise shuffled order over a (possibly replicated) data list. The
/// clips of any step depend only on the seed and the step number.
#[derive(Debug, Clone)]
pub struct Sampler {
    seed: u64,
    n_items: usize,
    epoch_samples: usize,
    cache: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    pub fn new(seed: u64, n_items: usize, epoch_samples: usize) -> Self {
        Self {
            seed,
            n_items,
            epoch_samples: epoch_samples.max(1),
            cache: None,
        }
    }

    fn epoch(&mut self, e: u64) -> &[usize] {
        if self.cache.as_ref().map(|c| c.0) != Some(e) {
            let mut order: Vec<usize> = (0..self.epoch_samples).map(|i| i % self.n_items).collect();
            order.shuffle(&mut fork(self.seed, Stream::DataOrder, e));
            self.cache = Some((e, order));
        }
        &self.cache.as_ref().expect("filled").1
    }

    /// Item indices at global sample positions `start..start + count`.
    pub fn take(&mut self, start: u64, count: usize) -> Vec<usize> {
        (start..start + count as u64)
            .map(|p| {
                let per = self.epoch_samples as u64;
                self.epoch(p / per)[(p % per) as usize]
            })
            .collect()
    }
}

fn crop<R: Rng + ?Sized>(spec: &Spectrogram, frames: usize, pad: f64, rng: &mut R) -> Spectrogram {
    let slack = spec.n_frames().saturating_sub(frames);
    let offset = if slack > 0 { rng.random_range(0..=slack) } else { 0 };
    spec.fit_frames(frames, offset, pad)
}

/// Seed of a `random` / `random:<seed>` teacher spec, `None` for a checkpoint path.
fn random_teacher_seed(cfg: &RunConfig, spec: &str) -> Result<Option<u64>> {
    match spec.strip_prefix("random") {
        Some("") => Ok(Some(cfg.seed)),
        Some(rest) => match rest.strip_prefix(':') {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| M2dError::config("offline.teacher", format!("bad seed in `{spec}`"))),
            None => Ok(None),
        },
        None => Ok(None),
    }
}

fn open_teacher(cfg: &RunConfig, spec: &str) -> Result<EncoderTeacher> {
    let layer = cfg.offline.as_ref().and_then(|o| o.teacher_layer);
    let Some(seed) = random_teacher_seed(cfg, spec)? else {
        return open_checkpoint_teacher(cfg, spec, layer);
    };
    let online = OnlineState::init(cfg.encoder, cfg.predictor, &mut fork(seed, Stream::Teacher, 0))?;
    EncoderTeacher::new(TargetState::from_online(&online), layer, cfg.mel.n_mels)
}

fn open_checkpoint_teacher(cfg: &RunConfig, path: &str, layer: Option<usize>) -> Result<EncoderTeacher> {
    let ck = Checkpoint::load(Path::new(path))?;
    let tcfg = ck.config()?;
    if cfg.clip_frames % tcfg.encoder.patch_t != 0 {
        return Err(M2dError::config(
            "offline.teacher",
            format!("teacher patch width {} does not tile clip_frames", tcfg.encoder.patch_t),
        ));
    }
    EncoderTeacher::new(TargetState::from_online(&ck.online), layer, cfg.mel.n_mels)
}

#[derive(Clone)]
enum Engine {
    M2d(M2dTrainer),
    M2dx(M2dxTrainer),
}

/// Training state plus everything needed to draw the next batch.
#[derive(Clone)]
pub struct Session {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub stats: DatasetStats,
    pub grid: PatchGrid,
    pub total_steps: u64,
    backgrounds: Vec<Spectrogram>,
    sampler: Sampler,
    engine: Engine,
}

impl Session {
    /// Fresh run. `offline` selects M2D-X and requires an `[offline]` section.
    pub fn new(cfg: &RunConfig, offline: bool) -> Result<Self> {
        Self::build(cfg, offline, None)
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn resume(cfg: &RunConfig, offline: bool, ck: Checkpoint) -> Result<Self> {
        if ck.config_snapshot != cfg.snapshot() {
            return Err(M2dError::config("resume", "configuration differs from the checkpoint's"));
        }
        Self::build(cfg, offline, Some(ck))
    }

    fn build(cfg: &RunConfig, offline: bool, ck: Option<Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let off_cfg = if offline { Some(cfg.require_offline()?.clone()) } else { None };
        let data = load_dataset(cfg)?;
        if data.is_empty() {
            return Err(M2dError::Data("no training clips".into()));
        }
        let stats = resolve_stats(cfg, &data)?;
        let grid = PatchGrid::for_shape(cfg.mel.n_mels, cfg.clip_frames, cfg.encoder.patch_f, cfg.encoder.patch_t)?;
        let total_steps = cfg.total_steps(data.len());
        let eff = cfg.effective_batch();
        let opts = ForwardOptions {
            variant: cfg.variant,
            target_norm: cfg.target_norm,
        };
        let lr = LrSchedule::new(&cfg.optimizer, eff, total_steps);
        let tau = cfg.tau_schedule(total_steps);
        tau.validate()?;

        let mut teacher: Option<EncoderTeacher> = None;
        let mut online = match &ck {
            Some(c) => c.online.clone(),
            None => OnlineState::init(cfg.encoder, cfg.predictor, &mut fork(cfg.seed, Stream::Init, 0))?,
        };
        if let Some(off) = &off_cfg {
            let spec = off.teacher.as_deref();
            match off.scenario {
                Scenario::Supervised => {
                    if data.labels.is_none() || data.n_classes != off.n_classes {
                        return Err(M2dError::config(
                            "offline.n_classes",
                            format!("data provides {:?} classes, config says {:?}", data.n_classes, off.n_classes),
                        ));
                    }
                }
                Scenario::Distill => teacher = Some(open_teacher(cfg, spec.expect("validated"))?),
                Scenario::Regularize => {
                    let path = spec.expect("validated");
                    let original = match random_teacher_seed(cfg, path)? {
                        Some(seed) => OnlineState::init(cfg.encoder, cfg.predictor, &mut fork(seed, Stream::Teacher, 0))?,
                        None => {
                            let orig = Checkpoint::load(Path::new(path))?;
                            if orig.online.encoder != cfg.encoder || orig.online.predictor != cfg.predictor {
                                return Err(M2dError::config(
                                    "offline.teacher",
                                    "regularize needs the original model to share the run's encoder and predictor shape",
                                ));
                            }
                            orig.online
                        }
                    };
                    let (init, t) = regularize_setup(&original, off.teacher_layer, cfg.mel.n_mels)?;
                    if ck.is_none() {
                        online = init;
                    }
                    teacher = Some(t);
                }
            }
        }
        let mut core = M2dTrainer::new(online, AdamW::new(&cfg.optimizer), lr, tau, opts);
        let backgrounds = match &off_cfg {
            Some(o) if o.eta > 0.0 => load_backgrounds(cfg, data.len())?,
            _ => Vec::new(),
        };
        let engine = match off_cfg {
            None => {
                if let Some(c) = ck {
                    core.target = c.target;
                    core.optimizer = c.optimizer;
                    core.step = c.step;
                }
                Engine::M2d(core)
            }
            Some(off) => {
                let t: Option<Arc<dyn Teacher>> = teacher.map(|t| Arc::new(t) as Arc<dyn Teacher>);
                let out = mapper_out_dim(&off, t.as_deref())?;
                let mut mapper = init_mapper(grid.n_f * cfg.encoder.dim, out, &mut fork(cfg.seed, Stream::Init, 1));
                if let Some(c) = ck {
                    core.target = c.target;
                    core.optimizer = c.optimizer;
                    core.step = c.step;
                    mapper = c
                        .mapper
                        .ok_or_else(|| M2dError::Load("checkpoint has no offline mapper".into()))?;
                }
                Engine::M2dx(M2dxTrainer::new(core, off, mapper, t)?)
            }
        };
        let sampler = Sampler::new(cfg.seed, data.len(), cfg.epoch_samples(data.len()));
        Ok(Self {
            cfg: cfg.clone(),
            data,
            stats,
            grid,
            total_steps,
            backgrounds,
            sampler,
            engine,
        })
    }

    fn core(&self) -> &M2dTrainer {
        match &self.engine {
            Engine::M2d(t) => t,
            Engine::M2dx(t) => &t.core,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.core().step
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.total_steps
    }

    pub fn online(&self) -> &OnlineState {
        &self.core().online
    }

    pub fn target(&self) -> &TargetState {
        &self.core().target
    }

    pub fn mapper(&self) -> Option<&ParamStore> {
        match &self.engine {
            Engine::M2dx(t) => Some(&t.mapper),
            Engine::M2d(_) => None,
        }
    }

    /// Cropped raw clips, item indices and mask plans of every micro-batch of `step`.
    pub fn draw(&mut self, step: u64) -> Result<Vec<(Vec<usize>, Vec<Spectrogram>, Vec<MaskPlan>)>> {
        let (b, accum) = (self.cfg.batch_size, self.cfg.grad_accum_steps);
        let mut crop_rng = fork(self.cfg.seed, Stream::Crop, step);
        let mut mask_rng = fork(self.cfg.seed, Stream::Masking, step);
        let n = self.grid.n_patches();
        (0..accum)
            .map(|m| {
                let start = (step * accum as u64 + m as u64) * b as u64;
                let idx = self.sampler.take(start, b);
                let specs: Vec<Spectrogram> = idx
                    .iter()
                    .map(|&i| crop(&self.data.specs[i], self.cfg.clip_frames, self.stats.mean, &mut crop_rng))
                    .collect();
                let plans = (0..b)
                    .map(|_| sample_mask(n, self.cfg.mask_ratio, &mut mask_rng))
                    .collect::<Result<Vec<_>>>()?;
                Ok((idx, specs, plans))
            })
            .collect()
    }

    pub fn step(&mut self, observer: &mut dyn StepObserver) -> Result<TrainStepReport> {
        let step = self.step_count();
        let micro = self.draw(step)?;
        let stats = self.stats;
        match &mut self.engine {
            Engine::M2d(t) => {
                let std: Vec<Vec<Spectrogram>> = micro
                    .iter()
                    .map(|(_, s, _)| s.iter().map(|x| crate::audio::standardize(x, &stats)).collect())
                    .collect();
                let mbs: Vec<MicroBatch> = std
                    .iter()
                    .zip(&micro)
                    .map(|(s, (_, _, p))| MicroBatch { specs: s, plans: p })
                    .collect();
                t.train_step(&mbs, observer)
            }
            Engine::M2dx(t) => {
                let eta = t.cfg.eta;
                let mut bg_rng = fork(self.cfg.seed, Stream::Noise, step);
                let mut batches = Vec::with_capacity(micro.len());
                for (idx, specs, _) in &micro {
                    let bgs: Vec<Spectrogram> = if eta > 0.0 {
                        specs
                            .iter()
                            .map(|_| {
                                let j = bg_rng.random_range(0..self.backgrounds.len());
                                crop(&self.backgrounds[j], self.cfg.clip_frames, stats.mean, &mut bg_rng)
                            })
                            .collect()
                    } else {
                        specs.clone()
                    };
                    let labels = match (t.cfg.scenario, &self.data.labels) {
                        (Scenario::Supervised, Some(l)) => Some(multi_hot(
                            &idx.iter().map(|&i| l[i].clone()).collect::<Vec<_>>(),
                            t.cfg.n_classes.expect("validated"),
                        )),
                        _ => None,
                    };
                    batches.push(OfflineBatch::from_raw(specs, &bgs, eta, &stats, labels)?);
                }
                let refs: Vec<(&OfflineBatch, &[MaskPlan])> =
                    batches.iter().zip(&micro).map(|(b, (_, _, p))| (b, p.as_slice())).collect();
                t.train_step(&refs, observer)
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let core = self.core();
        Checkpoint {
            config_snapshot: self.cfg.snapshot(),
            step: core.step,
            online: core.online.clone(),
            target: core.target.clone(),
            mapper: self.mapper().cloned(),
            optimizer: core.optimizer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub first_loss_m2d: Option<f64>,
    pub last_loss_m2d: Option<f64>,
    pub checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.m2d";

/// Trains to the end of the schedule, writing metrics and checkpoints into `out`.
pub fn run_training(session: &mut Session, out: &Path, observer: &mut dyn StepObserver) -> Result<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| M2dError::io(out, e))?;
    write_atomic(&out.join("config.json"), session.cfg.snapshot().as_bytes())?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = if session.step_count() > 0 {
        MetricsWriter::resume(&metrics_path, session.step_count())?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let start = Instant::now();
    let (mut first, mut last) = (None, None);
    while !session.is_done() {
        let r = session.step(observer)?;
        let secs = if session.cfg.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
        metrics.write(&MetricsRecord::from_report(&r, secs))?;
        first.get_or_insert(r.loss_m2d);
        last = Some(r.loss_m2d);
        let every = session.cfg.checkpoint_every;
        if every > 0 && r.step % every == 0 && !session.is_done() {
            session.checkpoint().save(&out.join(format!("checkpoint-{:08}.m2d", r.step)))?;
        }
    }
    let path = out.join(CHECKPOINT_FILE);
    session.checkpoint().save(&path)?;
    Ok(RunSummary {
        steps: session.step_count(),
        first_loss_m2d: first,
        last_loss_m2d: last,
        checkpoint: path,
    })
}

/// Per-clip frame features and clip features of `data` under `encoder`.
pub fn extract(
    encoder: &TargetState,
    data: &Dataset,
    stats: &DatasetStats,
    chunk_frames: usize,
) -> Result<(Vec<Mat>, Mat)> {
    let frames: Vec<Mat> = data
        .specs
        .iter()
        .map(|s| {
            let f = encode_chunked(encoder, &crate::audio::standardize(s, stats), chunk_frames)?;
            Ok(f.data.index_axis_move(ndarray::Axis(0), 0))
        })
        .collect::<Result<_>>()?;
    let width = frames.first().map_or(0, |f| f.ncols());
    let mut clips = Mat::zeros((frames.len(), width));
    for (i, f) in frames.iter().enumerate() {
        let ff = crate::transfer::FrameFeatures {
            data: f.clone().insert_axis(ndarray::Axis(0)),
            frames_per_second: 0.0,
        };
        clips.row_mut(i).assign(&clip_feature(&ff)?.data.row(0));
    }
    Ok((frames, clips))
}

/// Writes `frames.m2df`, `clips.m2df` and `manifest.tsv` into `out`.
pub fn write_features(out: &Path, ids: &[String], frames: &[Mat], clips: &Mat) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| M2dError::io(out, e))?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| M2dError::Dimension(e.to_string()))?;
    write_tensor(&out.join("frames.m2df"), &all.into_dyn(), DType::F64)?;
    write_tensor(&out.join("clips.m2df"), &clips.clone().into_dyn(), DType::F64)?;
    let mut offset = 0;
    let entries: Vec<ManifestEntry> = ids
        .iter()
        .zip(frames)
        .map(|(id, f)| {
            let e = ManifestEntry {
                clip_id: id.clone(),
                offset,
                rows: f.nrows(),
            };
            offset += f.nrows();
            e
        })
        .collect();
    write_manifest(&out.join("manifest.tsv"), &entries)
}

/// Encoder with the weights a run starts from, for comparisons.
pub fn random_init_encoder(cfg: &RunConfig) -> Result<TargetState> {
    let online = OnlineState::init(cfg.encoder, cfg.predictor, &mut fork(cfg.seed, Stream::Init, 0))?;
    Ok(TargetState::from_online(&online))
}

/// One line of probe output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub encoder: String,
    pub task: String,
    pub seed: u64,
    pub accuracy: f64,
}

pub fn task_name(cfg: &RunConfig) -> String {
    match cfg.data.source {
        DataSource::Synth => format!(
            "synth-{}x{}",
            cfg.data.synth.n_classes, cfg.data.synth.clips_per_class
        ),
        DataSource::Files => cfg
            .data
            .train_list
            .as_ref()
            .and_then(|p| p.file_stem())
            .map_or("files".into(), |s| s.to_string_lossy().into_owned()),
    }
}

/// Linear probes of `encoder` on `data`, one per configured probe seed.
pub fn probe_encoder(cfg: &RunConfig, encoder: &TargetState, data: &Dataset) -> Result<Vec<ProbeResult>> {
    let labels = data.single_labels()?;
    let n_classes = data.n_classes.unwrap_or(0);
    let stats = resolve_stats(cfg, data)?;
    let x = eval::extract_clip_features(encoder, &data.specs, &stats, cfg.clip_frames)?;
    let empty = Mat::zeros((x.nrows(), 1));
    let cmp = eval::compare_features(&x, &empty, &labels, n_classes, &cfg.probe, &cfg.probe_seeds)?;
    Ok(cmp.pretrained)
}

/// Pretrained vs. random-init probe comparison on `data`.
pub fn compare(cfg: &RunConfig, pretrained: &TargetState, data: &Dataset) -> Result<Comparison> {
    let labels = data.single_labels()?;
    let stats = resolve_stats(cfg, data)?;
    let random = random_init_encoder(cfg)?;
    eval::compare_encoders(
        pretrained,
        &random,
        &data.specs,
        &labels,
        data.n_classes.unwrap_or(0),
        &stats,
        cfg.clip_frames,
        &cfg.probe,
        &cfg.probe_seeds,
    )
}

pub fn write_probe_records(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}
