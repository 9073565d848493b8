//! Audio frontend: waveform to log-mel spectrogram, dataset standardization,
//! and the log-domain noise mixing used to build denoising inputs.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Zip};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{M2dError, Result};

/// Mel power is clamped to this value before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 80,
            fmin_hz: 50.0,
            fmax_hz: 8000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(M2dError::config("mel.sample_rate_hz", "must be positive"));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.fmin_hz > 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(M2dError::config(
                "mel.fmin_hz",
                format!(
                    "need 0 < fmin_hz < fmax_hz <= {nyquist}, got {}..{}",
                    self.fmin_hz, self.fmax_hz
                ),
            ));
        }
        if self.n_mels == 0 {
            return Err(M2dError::config("mel.n_mels", "must be positive"));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.window_ms) {
            return Err(M2dError::config("mel.hop_ms", "need 0 < hop_ms <= window_ms"));
        }
        if self.hop_samples() == 0 || self.window_samples() < 2 {
            return Err(M2dError::config("mel.window_ms", "window shorter than two samples"));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    /// FFT size; equal to the window length.
    pub fn n_fft(&self) -> usize {
        self.window_samples()
    }

    /// Frame count produced for a waveform of `samples` samples.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop_samples())
    }

    pub fn frames_per_second(&self) -> f64 {
        1000.0 / self.hop_ms
    }
}

/// Global log-mel statistics used for standardization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub mean: f64,
    pub std: f64,
}

impl DatasetStats {
    pub const AUDIOSET: DatasetStats = DatasetStats { mean: -7.1, std: 4.2 };

    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(M2dError::config("stats.std", format!("must be finite and > 0, got {std}")));
        }
        Ok(Self { mean, std })
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "audioset" => Ok(Self::AUDIOSET),
            "identity" => Ok(Self { mean: 0.0, std: 1.0 }),
            other => Err(M2dError::config("stats.preset", format!("unknown preset `{other}`"))),
        }
    }

    /// Mean and population standard deviation over every value of `specs`.
    pub fn estimate(specs: &[Spectrogram]) -> Result<Self> {
        let n: usize = specs.iter().map(|s| s.data.len()).sum();
        if n == 0 {
            return Err(M2dError::EmptyBatch("no spectrogram values to estimate statistics".into()));
        }
        let mean = specs.iter().map(|s| s.data.sum()).sum::<f64>() / n as f64;
        let var = specs
            .iter()
            .map(|s| s.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        Self::new(mean, var.sqrt().max(1e-8))
    }
}

/// A log-mel matrix of shape `n_mels × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<f64>,
    pub config: MelConfig,
}

impl Spectrogram {
    pub fn new(data: Array2<f64>, config: MelConfig) -> Result<Self> {
        if data.nrows() != config.n_mels {
            return Err(M2dError::Dimension(format!(
                "spectrogram has {} mel bins but config says {}",
                data.nrows(),
                config.n_mels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(M2dError::InvalidInput("spectrogram contains non-finite values".into()));
        }
        Ok(Self { data, config })
    }

    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    /// Crop (from `offset`) or right-pad with `pad_value` to exactly `frames` columns.
    pub fn fit_frames(&self, frames: usize, offset: usize, pad_value: f64) -> Spectrogram {
        let mut out = Array2::from_elem((self.n_mels(), frames), pad_value);
        let start = offset.min(self.n_frames());
        let take = (self.n_frames() - start).min(frames);
        out.slice_mut(ndarray::s![.., ..take])
            .assign(&self.data.slice(ndarray::s![.., start..start + take]));
        Spectrogram {
            data: out,
            config: self.config,
        }
    }
}

/// Converts Hz to the HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency of every mel band, in Hz.
pub fn mel_center_frequencies(config: &MelConfig) -> Vec<f64> {
    mel_points(config)[1..=config.n_mels].to_vec()
}

fn mel_points(config: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin_hz);
    let hi = hz_to_mel(config.fmax_hz);
    let n = config.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular mel filterbank of shape `n_mels × (n_fft / 2 + 1)`, unnormalized.
pub fn mel_filterbank(config: &MelConfig) -> Array2<f64> {
    let n_fft = config.n_fft();
    let n_bins = n_fft / 2 + 1;
    let pts = mel_points(config);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * config.sample_rate_hz as f64 / n_fft as f64)
        .collect();
    let mut fb = Array2::zeros((config.n_mels, n_bins));
    for m in 0..config.n_mels {
        let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
    }
    fb
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect()
}

/// Reusable log-mel extractor; holds the FFT plan, window and filterbank.
pub struct LogMel {
    config: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Array2<f64>,
}

impl LogMel {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let n_fft = config.n_fft();
        Ok(Self {
            config,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            window: periodic_hann(n_fft),
            filterbank: mel_filterbank(&config),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Centered frames over a reflection-padded signal, one frame every hop,
    /// `ceil(samples / hop)` frames in total.
    pub fn compute(&self, waveform: &[f64]) -> Result<Spectrogram> {
        let n_fft = self.config.n_fft();
        if waveform.len() < n_fft {
            return Err(M2dError::InputTooShort {
                needed: n_fft,
                got: waveform.len(),
            });
        }
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(M2dError::InvalidInput("waveform contains non-finite samples".into()));
        }
        let pad = n_fft / 2;
        let n = waveform.len();
        let padded: Vec<f64> = (0..n + 2 * pad)
            .map(|i| {
                let j = i as isize - pad as isize;
                let idx = if j < 0 {
                    (-j) as usize
                } else if j as usize >= n {
                    2 * (n - 1) - j as usize
                } else {
                    j as usize
                };
                waveform[idx]
            })
            .collect();

        let hop = self.config.hop_samples();
        let frames = self.config.frames_for(n);
        let n_bins = n_fft / 2 + 1;
        let mut power = Array2::<f64>::zeros((n_bins, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            let start = t * hop;
            for (k, slot) in buf.iter_mut().enumerate() {
                let s = padded.get(start + k).copied().unwrap_or(0.0);
                *slot = Complex::new(s * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..n_bins {
                power[[k, t]] = buf[k].norm_sqr();
            }
        }
        let mut mel = self.filterbank.dot(&power);
        mel.mapv_inplace(|p| p.max(LOG_FLOOR).ln());
        Spectrogram::new(mel, self.config)
    }
}

pub fn compute_logmel(waveform: &[f64], config: &MelConfig) -> Result<Spectrogram> {
    LogMel::new(*config)?.compute(waveform)
}

/// `(spec - mean) / std`, elementwise.
pub fn standardize(spec: &Spectrogram, stats: &DatasetStats) -> Spectrogram {
    Spectrogram {
        data: spec.data.mapv(|v| (v - stats.mean) / stats.std),
        config: spec.config,
    }
}

pub fn unstandardize(spec: &Spectrogram, stats: &DatasetStats) -> Spectrogram {
    Spectrogram {
        data: spec.data.mapv(|v| v * stats.std + stats.mean),
        config: spec.config,
    }
}

/// Blends two raw log-mel spectrograms in the linear power domain:
/// `log((1 - eta) * exp(targ) + eta * exp(bg))`.
pub fn mix_noisy(x_targ: &Spectrogram, x_bg: &Spectrogram, eta: f64) -> Result<Spectrogram> {
    if x_targ.data.dim() != x_bg.data.dim() {
        return Err(M2dError::Dimension(format!(
            "cannot mix {:?} with {:?}",
            x_targ.data.dim(),
            x_bg.data.dim()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(M2dError::Domain(format!("eta must lie in [0, 1], got {eta}")));
    }
    if eta == 0.0 {
        return Ok(x_targ.clone());
    }
    if eta == 1.0 {
        return Ok(x_bg.clone());
    }
    let mut out = Array2::zeros(x_targ.data.dim());
    Zip::from(&mut out)
        .and(&x_targ.data)
        .and(&x_bg.data)
        .for_each(|o, &a, &b| {
            // log-sum-exp form keeps large log powers finite
            let m = a.max(b);
            *o = m + ((1.0 - eta) * (a - m).exp() + eta * (b - m).exp()).ln();
        });
    Ok(Spectrogram {
        data: out,
        config: x_targ.config,
    })
}

/// Reads a single-channel RIFF/WAVE file as samples in [-1, 1].
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| M2dError::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(M2dError::Data(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(M2dError::Data(format!(
            "{}: sample rate {} Hz does not match the configured {} Hz (resample offline)",
            path.display(),
            spec.sample_rate,
            expected_rate
        )));
    }
    let samples: std::result::Result<Vec<f64>, hound::Error> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect(),
        (fmt, bits) => {
            return Err(M2dError::Data(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits (need 16-bit int or 32-bit float)",
                path.display()
            )))
        }
    };
    samples.map_err(|e| M2dError::Data(format!("{}: {e}", path.display())))
}

/// Writes mono 32-bit float PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let err = |e: hound::Error| M2dError::Data(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in samples {
        w.write_sample(s as f32).map_err(err)?;
    }
    w.finalize().map_err(err)
}

/// Mean over time of each mel band.
pub fn time_average(spec: &Spectrogram) -> Array1<f64> {
    spec.data.mean_axis(ndarray::Axis(1)).expect("spectrogram has frames")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sine(freq: f64, secs: f64, sr: u32) -> Vec<f64> {
        let n = (secs * sr as f64) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin() * 0.5)
            .collect()
    }

    #[test]
    fn six_seconds_gives_600_frames() {
        let cfg = MelConfig::default();
        let spec = compute_logmel(&vec![0.1; 96_000], &cfg).unwrap();
        assert_eq!(spec.data.dim(), (80, 600));
        // the model input length is the next multiple of the 16-frame patch
        assert_eq!(spec.fit_frames(600usize.div_ceil(16) * 16, 0, 0.0).data.dim(), (80, 608));
    }

    #[test]
    fn silence_is_constant_floor() {
        let spec = compute_logmel(&vec![0.0; 4000], &MelConfig::default()).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(spec.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn short_and_non_finite_inputs_rejected() {
        let cfg = MelConfig::default();
        assert!(matches!(
            compute_logmel(&[0.0; 10], &cfg),
            Err(M2dError::InputTooShort { needed: 400, got: 10 })
        ));
        let mut w = vec![0.0; 1000];
        w[3] = f64::NAN;
        assert!(matches!(compute_logmel(&w, &cfg), Err(M2dError::InvalidInput(_))));
    }

    #[test]
    fn deterministic() {
        let w = sine(440.0, 0.5, 16_000);
        let a = compute_logmel(&w, &MelConfig::default()).unwrap();
        let b = compute_logmel(&w, &MelConfig::default()).unwrap();
        assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn invalid_configs() {
        let mut c = MelConfig::default();
        c.fmax_hz = 9000.0;
        assert!(c.validate().is_err());
        let mut c = MelConfig::default();
        c.hop_ms = 30.0;
        assert!(c.validate().is_err());
        let mut c = MelConfig::default();
        c.n_mels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn standardize_examples() {
        let cfg = MelConfig { n_mels: 1, ..Default::default() };
        let s = Spectrogram::new(array![[-7.1, -2.9]], cfg).unwrap();
        let z = standardize(&s, &DatasetStats::AUDIOSET);
        assert!((z.data[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((z.data[[0, 1]] - 1.0).abs() < 1e-12);
        let id = standardize(&s, &DatasetStats::preset("identity").unwrap());
        assert_eq!(id.data, s.data);
        assert!(DatasetStats::new(0.0, 0.0).is_err());
    }

    #[test]
    fn mix_endpoints_and_errors() {
        let cfg = MelConfig { n_mels: 2, ..Default::default() };
        let a = Spectrogram::new(array![[1.0, -3.0], [0.5, 2.0]], cfg).unwrap();
        let b = Spectrogram::new(array![[-1.0, 4.0], [0.0, 2.5]], cfg).unwrap();
        assert_eq!(mix_noisy(&a, &b, 0.0).unwrap().data, a.data);
        assert_eq!(mix_noisy(&a, &b, 1.0).unwrap().data, b.data);
        assert!(matches!(mix_noisy(&a, &b, 1.5), Err(M2dError::Domain(_))));
        let c = Spectrogram::new(Array2::from_elem((2, 3), 0.0), cfg).unwrap();
        assert!(matches!(mix_noisy(&a, &c, 0.5), Err(M2dError::Dimension(_))));
        let k = Spectrogram::new(Array2::from_elem((2, 2), -4.2), cfg).unwrap();
        let m = mix_noisy(&k, &k, 0.37).unwrap();
        assert!(m.data.iter().all(|v| (v + 4.2).abs() < 1e-12));
    }

    #[test]
    fn fit_frames_pads_and_crops() {
        let cfg = MelConfig { n_mels: 1, ..Default::default() };
        let s = Spectrogram::new(array![[1.0, 2.0, 3.0]], cfg).unwrap();
        assert_eq!(s.fit_frames(5, 0, 0.0).data, array![[1.0, 2.0, 3.0, 0.0, 0.0]]);
        assert_eq!(s.fit_frames(2, 1, 0.0).data, array![[2.0, 3.0]]);
    }

    #[test]
    fn wav_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = sine(300.0, 0.1, 16_000);
        write_wav(&p, &w, 16_000).unwrap();
        let back = read_wav(&p, 16_000).unwrap();
        assert_eq!(back.len(), w.len());
        assert!(back.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(matches!(read_wav(&p, 22_050), Err(M2dError::Data(_))));
    }
}
