//! Multichannel STFT analysis and weighted overlap-add synthesis.
//!
//! Scaling convention: the forward transform is the plain unnormalized DFT of
//! the windowed frame, `X[k] = Σ_n w[n] x[n] e^{-2πikn/N}`, keeping the
//! `N/2 + 1` non-negative bins. Frame-wise Parseval then reads
//!
//! ```text
//! Σ_n |w[n] x[n]|² = (|X[0]|² + 2 Σ_{0<k<N/2} |X[k]|² + |X[N/2]|²) / N
//! ```
//!
//! (the Nyquist term only exists for even `N`). Synthesis applies the analysis
//! window a second time and divides by the overlap-added squared window,
//! clamped below at a tenth of its peak. Samples covered by a full set of
//! frames are reconstructed exactly; the first and last few hundred samples
//! are attenuated.
//! Frames are left-aligned: frame `t` covers samples `t·hop .. t·hop + N`.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COLA_TOLERANCE: f64 = 1e-6;

/// Time-domain multichannel audio, `samples[[n, channel]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Array2<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Array2<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAudio("samples must be finite".into()));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a buffer from per-channel sample vectors of equal length.
    pub fn from_channels(channels: &[Vec<f64>], sample_rate_hz: u32) -> Result<Self> {
        let n_ch = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidAudio("channels differ in length".into()));
        }
        let samples = Array2::from_shape_fn((len, n_ch), |(n, c)| channels[c][n]);
        Self::new(samples, sample_rate_hz)
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let n = samples.len();
        let samples = Array2::from_shape_vec((n, 1), samples)
            .map_err(|e| Error::InvalidAudio(e.to_string()))?;
        Self::new(samples, sample_rate_hz)
    }

    pub fn num_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.column(c).to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    /// Periodic Hamming.
    Hamming,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n;
                match self {
                    WindowKind::Hann => 0.5 - 0.5 * phase.cos(),
                    WindowKind::Hamming => 0.54 - 0.46 * phase.cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hann" | "hanning" => Ok(WindowKind::Hann),
            "hamming" => Ok(WindowKind::Hamming),
            "rect" | "rectangular" | "boxcar" => Ok(WindowKind::Rectangular),
            other => Err(Error::BadConfig(format!("unknown window '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 2048,
            hop_size: 512,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop_size: usize, window: WindowKind) -> Result<Self> {
        let cfg = StftConfig {
            fft_size,
            hop_size,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.fft_size {
            0
        } else {
            (num_samples - self.fft_size) / self.hop_size + 1
        }
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        self.window.coefficients(self.fft_size)
    }

    /// Checks sizes and the constant-overlap-add property of the window at
    /// this hop.
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.hop_size == 0 {
            return Err(Error::BadConfig("fft and hop sizes must be positive".into()));
        }
        if self.hop_size > self.fft_size {
            return Err(Error::BadConfig(format!(
                "hop {} exceeds fft size {}",
                self.hop_size, self.fft_size
            )));
        }
        let win = self.window_coefficients();
        let sums: Vec<f64> = (0..self.hop_size)
            .map(|n| win.iter().skip(n).step_by(self.hop_size).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        let worst = sums
            .iter()
            .map(|s| (s - mean).abs())
            .fold(0.0_f64, f64::max);
        if mean <= 0.0 || worst > COLA_TOLERANCE * mean {
            return Err(Error::BadConfig(format!(
                "{:?} window of {} samples is not overlap-add constant at hop {} (deviation {:.3e})",
                self.window,
                self.fft_size,
                self.hop_size,
                worst / mean.max(f64::MIN_POSITIVE)
            )));
        }
        Ok(())
    }
}

/// One-sided STFT tensor `data[[bin, frame, channel]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array3<Complex64>,
    pub config: StftConfig,
    pub sample_rate_hz: u32,
    /// Length of the analysed signal, restored by synthesis.
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn new(
        data: Array3<Complex64>,
        config: StftConfig,
        sample_rate_hz: u32,
        num_samples: usize,
    ) -> Result<Self> {
        let spec = Spectrogram {
            data,
            config,
            sample_rate_hz,
            num_samples,
        };
        spec.check_layout()?;
        Ok(spec)
    }

    pub fn num_bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().2
    }

    /// Same layout, different channel content (e.g. whitened or demixed).
    pub fn with_data(&self, data: Array3<Complex64>) -> Result<Self> {
        Spectrogram::new(data, self.config, self.sample_rate_hz, self.num_samples)
    }

    fn check_layout(&self) -> Result<()> {
        let (k, t, _) = self.data.dim();
        if k != self.config.num_bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} bins but fft size {} implies {}",
                k,
                self.config.fft_size,
                self.config.num_bins()
            )));
        }
        let covered = if t == 0 {
            0
        } else {
            (t - 1) * self.config.hop_size + self.config.fft_size
        };
        if covered > self.num_samples {
            return Err(Error::ShapeMismatch(format!(
                "{t} frames need {covered} samples but signal length is {}",
                self.num_samples
            )));
        }
        Ok(())
    }
}

/// Forward STFT of every channel.
pub fn analyze(audio: &AudioBuffer, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let n_samples = audio.num_samples();
    if n_samples < config.fft_size {
        return Err(Error::InsufficientSamples {
            needed: config.fft_size,
            got: n_samples,
        });
    }
    let n = config.fft_size;
    let bins = config.num_bins();
    let frames = config.num_frames(n_samples);
    let channels = audio.num_channels();
    let window = config.window_coefficients();
    let fft = FftPlanner::new().plan_fft_forward(n);

    let mut data = Array3::zeros((bins, frames, channels));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..channels {
        let x = audio.samples.column(c);
        for t in 0..frames {
            let start = t * config.hop_size;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(window[i] * x[start + i], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..bins {
                data[[k, t, c]] = buf[k];
            }
        }
    }
    Spectrogram::new(data, *config, audio.sample_rate_hz, n_samples)
}

/// Inverse STFT by weighted overlap-add.
/// Fraction of the peak squared-window sum below which the WOLA denominator is
/// clamped.
const EDGE_FLOOR: f64 = 0.1;

pub fn synthesize(spec: &Spectrogram) -> Result<AudioBuffer> {
    spec.config.validate()?;
    spec.check_layout()?;
    let cfg = &spec.config;
    let n = cfg.fft_size;
    let bins = spec.num_bins();
    let (frames, channels) = (spec.num_frames(), spec.num_channels());
    let window = cfg.window_coefficients();
    let ifft = FftPlanner::new().plan_fft_inverse(n);

    let mut denom = vec![0.0; spec.num_samples];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            denom[t * cfg.hop_size + i] += w * w;
        }
    }
    // Near the ends the squared-window sum vanishes; clamping it keeps modified
    // spectrograms from blowing up there. Fully overlapped samples are exact.
    let floor = EDGE_FLOOR * denom.iter().fold(0.0_f64, |m, d| m.max(*d));

    let mut out = Array2::zeros((spec.num_samples, channels));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..channels {
        for t in 0..frames {
            for k in 0..bins {
                buf[k] = spec.data[[k, t, c]];
            }
            for k in 1..bins {
                if n - k >= bins {
                    buf[n - k] = spec.data[[k, t, c]].conj();
                }
            }
            ifft.process(&mut buf);
            let start = t * cfg.hop_size;
            for i in 0..n {
                out[[start + i, c]] += window[i] * buf[i].re / n as f64;
            }
        }
        for (i, d) in denom.iter().enumerate() {
            out[[i, c]] = if *d > 0.0 { out[[i, c]] / d.max(floor) } else { 0.0 };
        }
    }
    AudioBuffer::new(out, spec.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_audio(len: usize, channels: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = Array2::from_shape_fn((len, channels), |_| rng.gen_range(-1.0..1.0));
        AudioBuffer::new(samples, 16_000).unwrap()
    }

    fn interior_rel_rms(a: &AudioBuffer, b: &AudioBuffer, margin: usize) -> f64 {
        let n = a.num_samples();
        let (mut err, mut refp) = (0.0, 0.0);
        for c in 0..a.num_channels() {
            for i in margin..n - margin {
                err += (a.samples[[i, c]] - b.samples[[i, c]]).powi(2);
                refp += b.samples[[i, c]].powi(2);
            }
        }
        (err / refp).sqrt()
    }

    #[test]
    fn default_configuration_has_1025_bins() {
        let audio = random_audio(16_000, 1, 1);
        let spec = analyze(&audio, &StftConfig::default()).unwrap();
        assert_eq!(spec.num_bins(), 1025);
        assert_eq!(spec.num_frames(), (16_000 - 2048) / 512 + 1);
    }

    #[test]
    fn zero_input_gives_zero_spectrum_and_back() {
        let audio = AudioBuffer::new(Array2::zeros((5000, 2)), 16_000).unwrap();
        let spec = analyze(&audio, &StftConfig::default()).unwrap();
        assert!(spec.data.iter().all(|v| v.norm() == 0.0));
        let back = synthesize(&spec).unwrap();
        assert!(back.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_magnitude() {
        let cfg = StftConfig::default();
        let fs = 16_000.0;
        let amp = 0.7;
        let f = 8.0 * fs / 2048.0;
        let x: Vec<f64> = (0..8192)
            .map(|n| amp * (2.0 * PI * f * n as f64 / fs).cos())
            .collect();
        let audio = AudioBuffer::mono(x.clone(), 16_000).unwrap();
        let spec = analyze(&audio, &cfg).unwrap();
        let win = cfg.window_coefficients();
        let expected = win.iter().sum::<f64>() / 2.0 * amp;
        for t in 0..spec.num_frames() {
            // direct DFT summation oracle at bin 8
            let start = t * cfg.hop_size;
            let oracle: Complex64 = (0..2048)
                .map(|n| {
                    let ang = -2.0 * PI * 8.0 * n as f64 / 2048.0;
                    Complex64::from_polar(win[n] * x[start + n], ang)
                })
                .sum();
            assert!((oracle.norm() - expected).abs() <= 1e-9 * expected);
            let got = spec.data[[8, t, 0]].norm();
            assert!((got - expected).abs() <= 1e-9 * expected, "{got} vs {expected}");
            let leak: f64 = (0..spec.num_bins())
                .filter(|k| (*k as i64 - 8).abs() > 1)
                .map(|k| spec.data[[k, t, 0]].norm())
                .fold(0.0, f64::max);
            assert!(leak < 1e-9 * expected);
        }
    }

    #[test]
    fn round_trip_default_config() {
        let audio = random_audio(20_000, 3, 7);
        let spec = analyze(&audio, &StftConfig::default()).unwrap();
        let back = synthesize(&spec).unwrap();
        assert!(interior_rel_rms(&back, &audio, 2048) <= 1e-8);
    }

    #[test]
    fn scaling_bins_scales_output() {
        let audio = random_audio(12_000, 2, 3);
        let mut spec = analyze(&audio, &StftConfig::default()).unwrap();
        spec.data.mapv_inplace(|v| v * 2.0);
        let back = synthesize(&spec).unwrap();
        let mut doubled = audio.clone();
        doubled.samples.mapv_inplace(|v| 2.0 * v);
        assert!(interior_rel_rms(&back, &doubled, 2048) <= 1e-8);
    }

    #[test]
    fn frame_parseval() {
        let cfg = StftConfig::new(256, 64, WindowKind::Hann).unwrap();
        let audio = random_audio(1024, 1, 11);
        let spec = analyze(&audio, &cfg).unwrap();
        let win = cfg.window_coefficients();
        for t in 0..spec.num_frames() {
            let time: f64 = (0..256)
                .map(|n| (win[n] * audio.samples[[t * 64 + n, 0]]).powi(2))
                .sum();
            let k = spec.num_bins();
            let mut freq = spec.data[[0, t, 0]].norm_sqr() + spec.data[[k - 1, t, 0]].norm_sqr();
            for b in 1..k - 1 {
                freq += 2.0 * spec.data[[b, t, 0]].norm_sqr();
            }
            freq /= 256.0;
            assert!((time - freq).abs() <= 1e-9 * time);
        }
    }

    #[test]
    fn odd_fft_size_round_trips() {
        let cfg = StftConfig::new(255, 85, WindowKind::Hann).unwrap();
        let audio = random_audio(3000, 1, 5);
        let spec = analyze(&audio, &cfg).unwrap();
        assert_eq!(spec.num_bins(), 128);
        let back = synthesize(&spec).unwrap();
        assert!(interior_rel_rms(&back, &audio, 255) <= 1e-8);
    }

    #[test]
    fn short_input_is_rejected() {
        let audio = random_audio(100, 1, 0);
        let err = analyze(&audio, &StftConfig::default()).unwrap_err();
        assert!(err.to_string().contains("insufficient samples"));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for (n, h, w) in [
            (0, 1, WindowKind::Hann),
            (256, 512, WindowKind::Hann),
            (256, 100, WindowKind::Hann),
            (256, 96, WindowKind::Rectangular),
        ] {
            let err = StftConfig::new(n, h, w).unwrap_err();
            assert!(err.to_string().contains("bad config"), "{n}/{h}");
        }
        assert!(StftConfig::new(1024, 512, WindowKind::Hamming).is_ok());
    }

    #[test]
    fn inconsistent_shape_is_rejected() {
        let data = Array3::zeros((10, 4, 1));
        assert!(Spectrogram::new(data, StftConfig::default(), 16_000, 10_000).is_err());
    }

    #[test]
    fn window_parsing() {
        assert_eq!("Hann".parse::<WindowKind>().unwrap(), WindowKind::Hann);
        assert!("kaiser".parse::<WindowKind>().is_err());
    }
}
