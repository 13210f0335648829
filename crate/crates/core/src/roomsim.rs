//! Shoebox room simulation with the image-source method.
//!
//! Walls share one pressure reflection coefficient obtained by inverting
//! Sabine's reverberation formula,
//!
//! ```text
//! T60 = 24 ln(10) V / (c S α),   β = √(1 - α)
//! ```
//!
//! with `α` clamped to 1, and `T60 = 0` gives anechoic walls.
//! Each image contributes `β^order / (4π d)` placed at `d / c` with an 81-tap
//! Hann-windowed sinc, which keeps sub-sample inter-microphone delays intact.

use std::f64::consts::{LN_10, PI};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::AudioBuffer;

pub type Point = [f64; 3];

/// Half-width of the fractional-delay kernel (81 taps in total).
const SINC_HALF_WIDTH: i64 = 40;
/// Extra tail, as a multiple of RT60, simulated past the direct arrival.
const DEFAULT_TAIL_RT60S: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Length, width, height in metres.
    pub dimensions: Point,
    /// Reverberation time in seconds.
    pub rt60: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
    /// Maximum total reflection order; unlimited when absent.
    #[serde(default)]
    pub max_order: Option<u32>,
    /// Impulse response length in seconds; defaults to the direct delay plus
    /// 1.5 × RT60.
    #[serde(default)]
    pub rir_length_s: Option<f64>,
}

fn default_speed_of_sound() -> f64 {
    343.0
}

impl RoomSpec {
    pub fn new(dimensions: Point, rt60: f64) -> Self {
        RoomSpec {
            dimensions,
            rt60,
            speed_of_sound: default_speed_of_sound(),
            max_order: None,
            rir_length_s: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidGeometry(format!(
                "room dimensions must be positive, got {:?}",
                self.dimensions
            )));
        }
        if !(self.rt60 >= 0.0 && self.rt60.is_finite()) {
            return Err(Error::InvalidGeometry(format!("rt60 must be non-negative, got {}", self.rt60)));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidGeometry("speed of sound must be positive".into()));
        }
        if let Some(len) = self.rir_length_s {
            if !(len > 0.0) {
                return Err(Error::InvalidGeometry("rir length must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + y * z + x * z)
    }

    /// Uniform wall pressure reflection coefficient `√(1 - α)` with the energy
    /// absorption `α` from Sabine's formula, clamped to a fully absorbing wall.
    pub fn reflection_coefficient(&self) -> f64 {
        if self.rt60 == 0.0 {
            return 0.0;
        }
        let alpha = 24.0 * LN_10 * self.volume() / (self.speed_of_sound * self.surface() * self.rt60);
        (1.0 - alpha).max(0.0).sqrt()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter()
            .zip(self.dimensions.iter())
            .all(|(v, d)| *v > 0.0 && v < d)
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Adds `amplitude · δ(n - delay)` band-limited with a Hann-windowed sinc.
fn add_fractional_impulse(h: &mut [f64], delay: f64, amplitude: f64) {
    let centre = delay.round() as i64;
    let frac = centre as f64 - delay; // x at j = 0
    let sin_frac = (PI * frac).sin();
    let span = (SINC_HALF_WIDTH + 1) as f64;
    for j in -SINC_HALF_WIDTH..=SINC_HALF_WIDTH {
        let n = centre + j;
        if n < 0 || n as usize >= h.len() {
            continue;
        }
        let x = j as f64 + frac;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            // sin(π(j + frac)) = (-1)^j sin(π frac)
            let s = if j.rem_euclid(2) == 0 { sin_frac } else { -sin_frac };
            s / (PI * x)
        };
        let window = 0.5 * (1.0 + (PI * x / span).cos());
        h[n as usize] += amplitude * window * sinc;
    }
}

/// Room impulse response from `src` to `mic` at sampling rate `fs`.
pub fn image_method_rir(room: &RoomSpec, src: &Point, mic: &Point, fs: u32) -> Result<Vec<f64>> {
    room.validate()?;
    for (name, p) in [("source", src), ("microphone", mic)] {
        if !room.contains(p) {
            return Err(Error::InvalidGeometry(format!("{name} position {p:?} is outside the room")));
        }
    }
    let direct = distance(src, mic);
    if direct < 1e-9 {
        return Err(Error::InvalidGeometry(format!(
            "source and microphone coincide at {src:?}"
        )));
    }
    let fs = fs as f64;
    let c = room.speed_of_sound;
    let length_s = room
        .rir_length_s
        .unwrap_or(direct / c + DEFAULT_TAIL_RT60S * room.rt60);
    let len = (length_s * fs).ceil() as usize + SINC_HALF_WIDTH as usize + 1;
    let mut h = vec![0.0; len];

    let beta = room.reflection_coefficient();
    let max_dist = len as f64 / fs * c;
    let dims = room.dimensions;
    let bounds: Vec<i64> = dims
        .iter()
        .map(|l| (max_dist / (2.0 * l)).ceil() as i64 + 1)
        .collect();
    let anechoic = beta == 0.0;

    for nx in -bounds[0]..=bounds[0] {
        for ny in -bounds[1]..=bounds[1] {
            for nz in -bounds[2]..=bounds[2] {
                let cells = [nx, ny, nz];
                for parity in 0..8u32 {
                    let q = [parity & 1, (parity >> 1) & 1, (parity >> 2) & 1];
                    let mut order = 0u32;
                    let mut d2 = 0.0;
                    for axis in 0..3 {
                        let sign = if q[axis] == 1 { -1.0 } else { 1.0 };
                        let img = sign * src[axis] + 2.0 * cells[axis] as f64 * dims[axis];
                        d2 += (img - mic[axis]).powi(2);
                        order += ((cells[axis] - q[axis] as i64).abs() + cells[axis].abs()) as u32;
                    }
                    if anechoic && order > 0 {
                        continue;
                    }
                    if room.max_order.is_some_and(|m| order > m) {
                        continue;
                    }
                    let d = d2.sqrt();
                    let delay = d / c * fs;
                    if delay - SINC_HALF_WIDTH as f64 >= len as f64 {
                        continue;
                    }
                    let gain = beta.powi(order as i32) / (4.0 * PI * d);
                    add_fractional_impulse(&mut h, delay, gain);
                }
            }
        }
    }
    Ok(h)
}

/// Linear convolution truncated to the length of `signal`.
pub fn convolve_truncated(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    if signal.is_empty() || kernel.is_empty() {
        return vec![0.0; signal.len()];
    }
    let n = (signal.len() + kernel.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(b.iter()) {
        *x *= y;
    }
    inv.process(&mut a);
    a.iter().take(signal.len()).map(|v| v.re / n as f64).collect()
}

/// A complete mixing setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub room: RoomSpec,
    pub source_positions: Vec<Point>,
    pub mic_positions: Vec<Point>,
    /// Mono dry signals, one per source.
    pub source_signals: Vec<AudioBuffer>,
    pub soi_index: usize,
    /// SOI power over summed interferer power at `ref_mic`, in dB.
    pub input_sir_db: f64,
    pub ref_mic: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        if self.mic_positions.len() < 2 {
            return Err(Error::InvalidGeometry(format!(
                "need at least 2 microphones, got {}",
                self.mic_positions.len()
            )));
        }
        if self.source_positions.is_empty() {
            return Err(Error::InvalidGeometry("no sources".into()));
        }
        if self.source_positions.len() != self.source_signals.len() {
            return Err(Error::Scenario(format!(
                "{} source positions but {} signals",
                self.source_positions.len(),
                self.source_signals.len()
            )));
        }
        for (i, p) in self.source_positions.iter().enumerate() {
            if !self.room.contains(p) {
                return Err(Error::InvalidGeometry(format!("source {i} at {p:?} is outside the room")));
            }
        }
        for (i, p) in self.mic_positions.iter().enumerate() {
            if !self.room.contains(p) {
                return Err(Error::InvalidGeometry(format!("microphone {i} at {p:?} is outside the room")));
            }
        }
        if self.soi_index >= self.source_positions.len() {
            return Err(Error::Scenario(format!("soi index {} out of range", self.soi_index)));
        }
        if self.ref_mic >= self.mic_positions.len() {
            return Err(Error::RefMicOutOfRange {
                ref_mic: self.ref_mic,
                channels: self.mic_positions.len(),
            });
        }
        Ok(())
    }
}

/// Rendered mixture with its per-source ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSet {
    pub mixture: AudioBuffer,
    /// Contribution of each source at every microphone.
    pub images: Vec<AudioBuffer>,
    /// Gain applied to the SOI to reach the requested input SIR.
    pub soi_gain: f64,
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Convolves every source with its RIRs, sets the SOI gain for the requested
/// input SIR at the reference microphone and sums the images.
pub fn render(scenario: &Scenario, fs: u32) -> Result<MixtureSet> {
    scenario.validate()?;
    let room = &scenario.room;
    if room.rt60 > 0.0 && room.reflection_coefficient() == 0.0 {
        log::warn!(
            "rt60 {} s is below the shortest reverberation time this room supports; walls are anechoic",
            room.rt60
        );
    }
    let len = scenario.source_signals[0].num_samples();
    for (i, s) in scenario.source_signals.iter().enumerate() {
        if s.sample_rate_hz != fs {
            return Err(Error::Scenario(format!(
                "source {i} sampled at {} Hz, scenario renders at {fs} Hz",
                s.sample_rate_hz
            )));
        }
        if s.num_samples() != len || s.num_channels() != 1 {
            return Err(Error::Scenario(format!(
                "source {i} must be mono with {len} samples"
            )));
        }
    }
    let n_mics = scenario.mic_positions.len();
    let mut images: Vec<Vec<Vec<f64>>> = Vec::with_capacity(scenario.source_positions.len());
    for (src, signal) in scenario.source_positions.iter().zip(&scenario.source_signals) {
        let dry = signal.channel(0);
        let per_mic = scenario
            .mic_positions
            .iter()
            .map(|mic| Ok(convolve_truncated(&dry, &image_method_rir(&scenario.room, src, mic, fs)?)))
            .collect::<Result<Vec<_>>>()?;
        images.push(per_mic);
    }

    let soi = scenario.soi_index;
    let r = scenario.ref_mic;
    let mut interference = vec![0.0; len];
    for (i, img) in images.iter().enumerate() {
        if i != soi {
            for (acc, v) in interference.iter_mut().zip(&img[r]) {
                *acc += v;
            }
        }
    }
    let p_soi = mean_power(&images[soi][r]);
    let p_int = mean_power(&interference);
    let soi_gain = if images.len() > 1 && p_soi > 0.0 && p_int > 0.0 {
        (10f64.powf(scenario.input_sir_db / 10.0) * p_int / p_soi).sqrt()
    } else {
        1.0
    };
    for ch in images[soi].iter_mut() {
        ch.iter_mut().for_each(|v| *v *= soi_gain);
    }

    let mut mix = Array2::zeros((len, n_mics));
    for img in &images {
        for (m, ch) in img.iter().enumerate() {
            for (n, v) in ch.iter().enumerate() {
                mix[[n, m]] += v;
            }
        }
    }
    let images = images
        .into_iter()
        .map(|img| AudioBuffer::from_channels(&img, fs))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureSet {
        mixture: AudioBuffer::new(mix, fs)?,
        images,
        soi_gain,
    })
}

/// Fixed evaluation geometry: a 7 × 5 × 2.75 m room, a 6-microphone linear
/// array centred at (4, 1, 1.5) m with 1.25 cm spacing along x, and six
/// source positions 1.5 m from the array centre at ear height.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultGeometry {
    pub room: RoomSpec,
    pub mics: Vec<Point>,
    pub sources: Vec<Point>,
}

pub const ARRAY_CENTRE: Point = [4.0, 1.0, 1.5];
pub const MIC_SPACING: f64 = 0.0125;
/// Azimuths (degrees, from the array axis) of the six default sources.
pub const SOURCE_AZIMUTHS_DEG: [f64; 6] = [90.0, 40.0, 140.0, 65.0, 115.0, 15.0];
pub const SOURCE_DISTANCE: f64 = 1.5;

pub fn default_geometry() -> DefaultGeometry {
    let mics = (0..6)
        .map(|i| {
            [
                ARRAY_CENTRE[0] + (i as f64 - 2.5) * MIC_SPACING,
                ARRAY_CENTRE[1],
                ARRAY_CENTRE[2],
            ]
        })
        .collect();
    let sources = SOURCE_AZIMUTHS_DEG
        .iter()
        .map(|deg| {
            let a = deg.to_radians();
            [
                ARRAY_CENTRE[0] + SOURCE_DISTANCE * a.cos(),
                ARRAY_CENTRE[1] + SOURCE_DISTANCE * a.sin(),
                ARRAY_CENTRE[2],
            ]
        })
        .collect();
    DefaultGeometry {
        room: RoomSpec::new([7.0, 5.0, 2.75], 0.2),
        mics,
        sources,
    }
}

/// Envelope level of the background between syllables, relative to a
/// full-scale syllable peak.
pub const SYNTHETIC_FLOOR: f64 = 0.05;

/// Seeded speech-like test signal: i.i.d. Laplacian samples under a random
/// syllable envelope (Hann bursts of 80-300 ms with random peak level and
/// pauses of up to 400 ms) over a background floor of
/// [`SYNTHETIC_FLOOR`], normalized to unit power.
pub fn synthetic_speech(len: usize, fs: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = fs as f64;
    let mut env = vec![SYNTHETIC_FLOOR; len];
    let mut n = ((rng.gen_range(0.0..0.2) * fs) as usize).min(len / 4);
    while n < len {
        let dur = ((rng.gen_range(0.08..0.3) * fs) as usize).max(2);
        let level = rng.gen_range(0.2..1.0);
        for (j, e) in env[n..(n + dur).min(len)].iter_mut().enumerate() {
            *e += level * (PI * j as f64 / dur as f64).sin().powi(2);
        }
        n += dur;
        if rng.gen_bool(0.4) {
            n += (rng.gen_range(0.05..0.4) * fs) as usize;
        }
    }
    let mut x: Vec<f64> = env
        .iter()
        .map(|e| {
            let u: f64 = rng.gen_range(-0.5..0.5);
            -u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln() * e
        })
        .collect();
    let p = mean_power(&x);
    if p > 0.0 {
        let g = p.sqrt().recip();
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

/// Energy decay curve in dB (Schroeder backward integration).
pub fn schroeder_decay_db(h: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut edc: Vec<f64> = h
        .iter()
        .rev()
        .map(|v| {
            acc += v * v;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|e| if total > 0.0 { 10.0 * (e / total).log10() } else { f64::NEG_INFINITY })
        .collect()
}
