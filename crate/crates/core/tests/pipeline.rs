use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fastive::extractor::{initialize, iterate_once, solve};
use fastive::metrics::input_output_sir;
use fastive::roomsim::{synthetic_speech, MixtureSet};
use fastive::stft::analyze;
use fastive::whitening::{apply_whitener, build_whitener, estimate_covariance};
use fastive::{extract, AudioBuffer, ContrastModel, SolverConfig, StftConfig};

const FS: u32 = 16_000;

/// Instantaneous mixture `x_m = Σ_i a[m, i] s_i`, with the SOI scaled to
/// `sir_db` above the summed interference at mic 0.
fn instantaneous(sources: &[Vec<f64>], mixing: &Array2<f64>, sir_db: f64) -> MixtureSet {
    let m = mixing.nrows();
    let n = sources[0].len();
    let power = |i: usize| mixing[[0, i]].powi(2) * sources[i].iter().map(|v| v * v).sum::<f64>();
    let interference: f64 = (1..sources.len()).map(power).sum();
    let gain = if interference > 0.0 {
        (10f64.powf(sir_db / 10.0) * interference / power(0)).sqrt()
    } else {
        1.0
    };
    let images: Vec<AudioBuffer> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let g = if i == 0 { gain } else { 1.0 };
            let data = Array2::from_shape_fn((n, m), |(t, c)| g * mixing[[c, i]] * s[t]);
            AudioBuffer::new(data, FS).unwrap()
        })
        .collect();
    let mut mixture = images[0].samples.clone();
    for img in &images[1..] {
        mixture += &img.samples;
    }
    MixtureSet {
        mixture: AudioBuffer::new(mixture, FS).unwrap(),
        images,
        soi_gain: gain,
    }
}

fn random_mixing(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((m, n), |_| rng.gen_range(0.3..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa * bb).sqrt()
}

#[test]
fn dominant_source_is_captured_on_instantaneous_batteries() {
    const TRIALS: usize = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let priors = [ContrastModel::ssl(), ContrastModel::gg(), ContrastModel::student_t(4.0).unwrap()];
    let mut wins = [0usize; 3];
    for trial in 0..TRIALS {
        let sources: Vec<Vec<f64>> = (0..2).map(|i| synthetic_speech(4 * FS as usize, FS, 100 * trial as u64 + i)).collect();
        let mix = instantaneous(&sources, &random_mixing(2, 2, &mut rng), 10.0);
        for (p, prior) in priors.iter().enumerate() {
            let config = SolverConfig {
                prior: *prior,
                ..Default::default()
            };
            let out = extract(&mix.mixture, &config, &StftConfig::default()).unwrap();
            let (input, output) = input_output_sir(&out.audio.channel(0), &mix, 0, 0, 64).unwrap();
            if output > input {
                wins[p] += 1;
            }
        }
    }
    for (prior, w) in priors.iter().zip(wins) {
        assert!(w * 10 >= TRIALS * 9, "{}: {w}/{TRIALS} successes", prior.label());
    }
}

#[test]
fn extracted_signal_tracks_the_dominant_source() {
    let sources: Vec<Vec<f64>> = (0..2).map(|i| synthetic_speech(5 * FS as usize, FS, 40 + i)).collect();
    let mixing = ndarray::array![[1.0, 0.6], [0.7, -0.9]];
    let mix = instantaneous(&sources, &mixing, 10.0);
    let out = extract(&mix.mixture, &SolverConfig::default(), &StftConfig::default()).unwrap();
    let y = out.audio.channel(0);
    let rho = correlation(&y[2048..y.len() - 2048], &sources[0][2048..y.len() - 2048]);
    assert!(rho.abs() > 0.95, "correlation {rho}");
}

#[test]
fn single_active_source_is_reproduced() {
    let soi = synthetic_speech(4 * FS as usize, FS, 9);
    let silent = vec![0.0; soi.len()];
    let mixing = ndarray::array![[0.8, 0.5], [0.4, 0.9]];
    let mix = instantaneous(&[soi, silent], &mixing, 0.0);
    let out = extract(&mix.mixture, &SolverConfig::default(), &StftConfig::default()).unwrap();
    let y = out.audio.channel(0);
    let target = mix.images[0].channel(0);
    let n = y.len();
    let (mut err, mut energy) = (0.0, 0.0);
    for t in 2048..n - 2048 {
        err += (y[t] - target[t]).powi(2);
        energy += target[t].powi(2);
    }
    let rel = (err / energy).sqrt();
    assert!(rel <= 1e-2, "interior rel-RMS {rel}");
}

#[test]
fn repeated_extraction_is_bit_identical() {
    let sources: Vec<Vec<f64>> = (0..3).map(|i| synthetic_speech(2 * FS as usize, FS, 70 + i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mix = instantaneous(&sources, &random_mixing(3, 3, &mut rng), 6.0);
    let a = extract(&mix.mixture, &SolverConfig::default(), &StftConfig::default()).unwrap();
    let b = extract(&mix.mixture, &SolverConfig::default(), &StftConfig::default()).unwrap();
    assert_eq!(a.audio, b.audio);
    assert_eq!(a.state, b.state);
}

#[test]
fn converged_state_is_a_fixed_point() {
    let sources: Vec<Vec<f64>> = (0..2).map(|i| synthetic_speech(3 * FS as usize, FS, 11 + i)).collect();
    let mix = instantaneous(&sources, &ndarray::array![[1.0, 0.5], [0.3, 1.0]], 8.0);
    let spec = analyze(&mix.mixture, &StftConfig::default()).unwrap();
    let bank = build_whitener(&estimate_covariance(&spec).unwrap(), 2).unwrap();
    let white = apply_whitener(&spec, &bank).unwrap();
    let config = SolverConfig {
        max_iter: 500,
        ..Default::default()
    };
    let state = solve(&white, &config).unwrap();
    assert!(state.converged, "no convergence after {} iterations", state.iteration);
    let next = iterate_once(&white, &state, &config.prior).unwrap();
    let change = next
        .w
        .rows()
        .into_iter()
        .zip(state.w.rows())
        .map(|(a, b)| 1.0 - a.iter().zip(b.iter()).map(|(x, y)| y.conj() * x).sum::<fastive::C64>().norm())
        .fold(0.0, f64::max);
    assert!(change < config.tol, "change {change}");
    assert_eq!(initialize(&bank).w.dim(), state.w.dim());
}
