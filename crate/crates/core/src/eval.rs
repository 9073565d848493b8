//! Synthetic labelled audio and a linear-probe evaluation on frozen
//! clip features.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{standardize, DatasetStats, LogMel, Spectrogram};
use crate::error::{M2dError, Result};
use crate::networks::EncoderParams;
use crate::nn::optim::{AdamW, OptimConfig};
use crate::nn::{Mat, ParamStore, Tape};
use crate::rng::{fork, Stream};
use crate::transfer::{clip_feature, encode_chunked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseColor {
    White,
    Pink,
    Brown,
}

/// Generative recipe of one class: a harmonic tone with a fundamental drawn
/// from `f0_hz`, amplitude and frequency modulation, and additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub f0_hz: (f64, f64),
    pub harmonics: usize,
    pub am_rate_hz: (f64, f64),
    pub am_depth: f64,
    pub fm_rate_hz: (f64, f64),
    /// Peak frequency deviation relative to f0.
    pub fm_depth: f64,
    /// Noise color is drawn per clip from this list.
    pub noise: Vec<NoiseColor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    /// Signal-to-noise ratio range in dB, drawn per clip.
    pub snr_db: (f64, f64),
    /// Peak amplitude range, drawn per clip.
    pub gain: (f64, f64),
    pub classes: Vec<ClassSpec>,
}

impl Default for SynthTask {
    fn default() -> Self {
        Self::with_classes(4, 64, 2.0)
    }
}

impl SynthTask {
    /// Default recipe: fundamentals in disjoint bands, log-spaced from 200 Hz
    /// to 2.4 kHz, with shared modulation and noise nuisances.
    pub fn with_classes(n_classes: usize, clips_per_class: usize, duration_s: f64) -> Self {
        let (lo, hi) = (200.0f64, 2400.0f64);
        let step = (hi / lo).powf(1.0 / n_classes.max(1) as f64);
        let classes = (0..n_classes)
            .map(|k| {
                let start = lo * step.powi(k as i32);
                ClassSpec {
                    f0_hz: (start, start * step.powf(0.6)),
                    harmonics: 3,
                    am_rate_hz: (1.0, 8.0),
                    am_depth: 0.5,
                    fm_rate_hz: (2.0, 6.0),
                    fm_depth: 0.02,
                    noise: vec![NoiseColor::White, NoiseColor::Pink, NoiseColor::Brown],
                }
            })
            .collect();
        Self {
            n_classes,
            clips_per_class,
            duration_s,
            sample_rate_hz: 16_000,
            snr_db: (0.0, 20.0),
            gain: (0.1, 0.9),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.classes.len() != self.n_classes {
            return Err(M2dError::config("task.classes", "need one recipe per class and at least 2 classes"));
        }
        if self.clips_per_class == 0 || !(self.duration_s > 0.0) {
            return Err(M2dError::config("task.clips_per_class", "clip count and duration must be positive"));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        let mut bands: Vec<(f64, f64)> = self.classes.iter().map(|c| c.f0_hz).collect();
        for c in &self.classes {
            if !(c.f0_hz.0 > 0.0 && c.f0_hz.0 <= c.f0_hz.1) || c.f0_hz.1 * (1.0 + c.fm_depth) >= nyquist {
                return Err(M2dError::config("task.classes.f0_hz", format!("invalid band {:?}", c.f0_hz)));
            }
            if c.harmonics == 0 || c.noise.is_empty() || !(0.0..=1.0).contains(&c.am_depth) {
                return Err(M2dError::config("task.classes", "bad harmonic, noise or modulation settings"));
            }
        }
        bands.sort_by(|a, b| a.0.total_cmp(&b.0));
        if bands.windows(2).any(|w| w[0].1 >= w[1].0) {
            return Err(M2dError::config("task.classes.f0_hz", "fundamental bands overlap"));
        }
        if !(self.gain.0 > 0.0 && self.gain.0 <= self.gain.1 && self.gain.1 <= 1.0) {
            return Err(M2dError::config("task.gain", "must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub label: usize,
    pub audio: Vec<f64>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn colored_noise<R: Rng + ?Sized>(rng: &mut R, color: NoiseColor, n: usize) -> Vec<f64> {
    let white = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal));
    match color {
        NoiseColor::White => white.collect(),
        NoiseColor::Pink => {
            // Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseColor::Brown => {
            let mut acc = 0.0;
            white
                .map(|w| {
                    acc = 0.995 * acc + w * 0.1;
                    acc
                })
                .collect()
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// One clip of class `label`; the same `rng` state gives the same samples.
pub fn synth_clip<R: Rng + ?Sized>(task: &SynthTask, label: usize, rng: &mut R) -> Vec<f64> {
    let c = &task.classes[label];
    let n = task.n_samples();
    let sr = task.sample_rate_hz as f64;
    let f0 = uniform(rng, c.f0_hz);
    let am = uniform(rng, c.am_rate_hz);
    let fm = uniform(rng, c.fm_rate_hz);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let fm_phase = rng.random_range(0.0..2.0 * PI);
    let mut phases: Vec<f64> = (0..c.harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut tone = vec![0.0; n];
    for (i, s) in tone.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let inst = f0 * (1.0 + c.fm_depth * (2.0 * PI * fm * t + fm_phase).sin());
        let env = 1.0 - c.am_depth * 0.5 * (1.0 + (2.0 * PI * am * t + am_phase).sin());
        for (h, ph) in phases.iter_mut().enumerate() {
            let k = (h + 1) as f64;
            if inst * k < sr / 2.0 {
                *s += env * ph.sin() / k;
            }
            *ph += 2.0 * PI * inst * k / sr;
        }
    }
    let color = c.noise[rng.random_range(0..c.noise.len())];
    let noise = colored_noise(rng, color, n);
    let snr = uniform(rng, task.snr_db);
    let scale = rms(&tone) / rms(&noise).max(1e-12) / 10f64.powf(snr / 20.0);
    let mut out: Vec<f64> = tone.iter().zip(&noise).map(|(a, b)| a + scale * b).collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = uniform(rng, task.gain) / peak;
    out.iter_mut().for_each(|v| *v *= gain);
    out
}

/// Balanced labelled clips, class-major order. Each clip has its own
/// random stream so the set is reproducible from `seed` alone.
pub fn generate_synth(task: &SynthTask, seed: u64) -> Result<Vec<LabeledClip>> {
    task.validate()?;
    let mut clips = Vec::with_capacity(task.n_classes * task.clips_per_class);
    for label in 0..task.n_classes {
        for j in 0..task.clips_per_class {
            let idx = label * task.clips_per_class + j;
            let mut rng = fork(seed, Stream::Synth, idx as u64);
            clips.push(LabeledClip {
                id: format!("synth-c{label}-{j:04}"),
                label,
                audio: synth_clip(task, label, &mut rng),
            });
        }
    }
    Ok(clips)
}

/// Raw log-mel spectrograms of `waves`, computed in parallel.
pub fn logmels(frontend: &LogMel, waves: &[&[f64]]) -> Result<Vec<Spectrogram>> {
    par_map(waves, |w| frontend.compute(w))
}

/// Clip features (temporal means of chunked frame features) of raw log-mels,
/// one row per clip.
pub fn extract_clip_features(
    encoder: &(impl EncoderParams + Sync),
    specs: &[Spectrogram],
    stats: &DatasetStats,
    chunk_frames: usize,
) -> Result<Mat> {
    let rows = par_map(specs, |s| {
        let frames = encode_chunked(encoder, &standardize(s, stats), chunk_frames)?;
        Ok(clip_feature(&frames)?.data.row(0).to_owned())
    })?;
    let width = rows.first().map_or(0, |r| r.len());
    let mut out = Mat::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let per = items.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|chunk| s.spawn(|| chunk.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split; every class must land in every part.
pub fn stratified_split<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    train_frac: f64,
    val_frac: f64,
    rng: &mut R,
) -> Result<Split> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(M2dError::config("probe.train_frac", "fractions must be positive and sum below 1"));
    }
    let mut split = Split {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = (n as f64 * val_frac).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(M2dError::Split(format!("class {c} has {n} items, too few for every split")));
        }
        split.train.extend(&idx[..n_train]);
        split.val.extend(&idx[n_train..n_train + n_val]);
        split.test.extend(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 200,
            patience: 20,
            batch_size: 32,
            weight_decay: 0.0,
            train_frac: 0.6,
            val_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub seed: u64,
}

fn rows(m: &Mat, idx: &[usize]) -> Mat {
    m.select(ndarray::Axis(0), idx)
}

fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &y)| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - r[y]
        })
        .sum();
    total / labels.len().max(1) as f64
}

fn accuracy(logits: &Mat, labels: &[usize]) -> f64 {
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &y)| {
            let best = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains a softmax linear classifier on frozen features standardized with
/// training-split statistics, keeps the weights with the best validation
/// accuracy and reports test accuracy.
pub fn linear_probe(
    features: &Mat,
    labels: &[usize],
    n_classes: usize,
    split: &Split,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if features.nrows() != labels.len() {
        return Err(M2dError::Dimension(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= n_classes) {
        return Err(M2dError::Data("label out of range".into()));
    }
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for c in 0..n_classes {
            if !part.iter().any(|&i| labels[i] == c) {
                return Err(M2dError::Split(format!("class {c} missing from the {name} split")));
            }
        }
    }
    let train = rows(features, &split.train);
    let mean = train.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let std = train.std_axis(ndarray::Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let norm = |m: Mat| (m - &mean) / &std;
    let x_train = norm(train);
    let x_val = norm(rows(features, &split.val));
    let x_test = norm(rows(features, &split.test));
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (y_train, y_val, y_test) = (pick(&split.train), pick(&split.val), pick(&split.test));

    let mut params = ParamStore::new();
    params.insert("probe.weight", Mat::zeros((features.ncols(), n_classes)));
    params.insert("probe.bias", Mat::zeros((1, n_classes)));
    let mut opt = AdamW::new(&OptimConfig {
        weight_decay: cfg.weight_decay,
        beta2: 0.999,
        ..OptimConfig::default()
    });
    let predict = |p: &ParamStore, x: &Mat| x.dot(p.expect("probe.weight")) + p.expect("probe.bias");
    let mut best = ((f64::NEG_INFINITY, f64::NEG_INFINITY), params.clone(), 0usize);
    let mut order: Vec<usize> = (0..x_train.nrows()).collect();
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        let mut rng = fork(seed, Stream::Probe, epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, true);
            let x = tape.constant(rows(&x_train, batch));
            let h = tape.matmul(x, b.get("probe.weight"));
            let logits = tape.add_row(h, b.get("probe.bias"));
            let loss = tape.softmax_cross_entropy(logits, batch.iter().map(|&i| y_train[i]).collect());
            let grads = tape.backward(loss);
            let g = crate::training::grads_by_name(&b, &grads);
            opt.begin_step();
            opt.apply(&mut params, &g, cfg.lr);
        }
        // accuracy ties on a small val split go to the lower val loss
        let logits = predict(&params, &x_val);
        let val = (accuracy(&logits, &y_val), -cross_entropy(&logits, &y_val));
        if val > best.0 {
            best = (val, params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    Ok(ProbeResult {
        accuracy: accuracy(&predict(&best.1, &x_test), &y_test),
        val_accuracy: best.0 .0,
        n_train: split.train.len(),
        n_test: split.test.len(),
        epochs,
        seed,
    })
}

/// Probe results of two encoders over the same clips, splits and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pretrained: Vec<ProbeResult>,
    pub random_init: Vec<ProbeResult>,
}

fn mean_std(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.collect();
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl Comparison {
    pub fn pretrained_mean_std(&self) -> (f64, f64) {
        mean_std(self.pretrained.iter().map(|r| r.accuracy))
    }

    pub fn random_mean_std(&self) -> (f64, f64) {
        mean_std(self.random_init.iter().map(|r| r.accuracy))
    }

    /// Mean accuracy gap, pretrained minus random-init.
    pub fn gap(&self) -> f64 {
        self.pretrained_mean_std().0 - self.random_mean_std().0
    }
}

/// Probes each encoder's features once per seed; seed `s` fixes the split
/// and the probe's shuffling for both encoders.
pub fn compare_features(
    pretrained: &Mat,
    random_init: &Mat,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<Comparison> {
    let mut cmp = Comparison {
        pretrained: vec![],
        random_init: vec![],
    };
    for &seed in seeds {
        let split = stratified_split(labels, n_classes, cfg.train_frac, cfg.val_frac, &mut fork(seed, Stream::Probe, u64::MAX))?;
        cmp.pretrained.push(linear_probe(pretrained, labels, n_classes, &split, cfg, seed)?);
        cmp.random_init.push(linear_probe(random_init, labels, n_classes, &split, cfg, seed)?);
    }
    Ok(cmp)
}

/// Runs the same extract-and-probe pipeline on both encoders.
#[allow(clippy::too_many_arguments)]
pub fn compare_encoders(
    pretrained: &(impl EncoderParams + Sync),
    random_init: &(impl EncoderParams + Sync),
    specs: &[Spectrogram],
    labels: &[usize],
    n_classes: usize,
    stats: &DatasetStats,
    chunk_frames: usize,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<Comparison> {
    if pretrained.encoder_config() != random_init.encoder_config() {
        return Err(M2dError::Consistency("encoders have different configurations".into()));
    }
    pretrained.params().check_same_layout(random_init.params())?;
    let a = extract_clip_features(pretrained, specs, stats, chunk_frames)?;
    let b = extract_clip_features(random_init, specs, stats, chunk_frames)?;
    compare_features(&a, &b, labels, n_classes, cfg, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synth_counts_and_determinism() {
        let task = SynthTask::with_classes(4, 3, 0.25);
        let a = generate_synth(&task, 7).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, generate_synth(&task, 7).unwrap());
        assert_ne!(a[0].audio, generate_synth(&task, 8).unwrap()[0].audio);
        assert!(a.iter().all(|c| c.audio.iter().all(|v| v.abs() <= 1.0)));
        assert_eq!(a.iter().filter(|c| c.label == 2).count(), 3);
    }

    #[test]
    fn overlapping_bands_rejected() {
        let mut task = SynthTask::with_classes(2, 1, 0.1);
        task.classes[1].f0_hz = task.classes[0].f0_hz;
        assert!(task.validate().is_err());
    }

    #[test]
    fn separable_clusters_probe_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let x = Mat::from_shape_fn((40, 3), |(i, j)| {
            (if labels[i] == 1 { 5.0 } else { -5.0 }) + rng.random_range(-1.0..1.0) * (j as f64 + 1.0) * 0.1
        });
        let split = stratified_split(&labels, 2, 0.6, 0.2, &mut rng).unwrap();
        let r = linear_probe(&x, &labels, 2, &split, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.n_test, 8);
    }

    #[test]
    fn split_errors() {
        let labels = vec![0, 0, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(stratified_split(&labels, 2, 0.6, 0.2, &mut rng), Err(M2dError::Split(_))));
        let split = Split {
            train: vec![0, 3],
            val: vec![1, 3],
            test: vec![2],
        };
        let x = Mat::zeros((4, 2));
        assert!(matches!(
            linear_probe(&x, &labels, 2, &split, &ProbeConfig::default(), 0),
            Err(M2dError::Split(_))
        ));
    }
}
