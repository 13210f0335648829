//! Projection-based SIR evaluation.
//!
//! An estimate `ŝ` is split against the true source images using time-invariant
//! filters of `L` taps:
//!
//! * target part: least-squares projection of `ŝ` onto the target image and
//!   its delays `0..L`,
//! * interference part: projection onto the joint span of all images and their
//!   delays, minus the target part (i.e. the residual's projection onto that
//!   span, orthogonal to the target subspace),
//! * artifact part: what the joint span cannot explain.
//!
//! Delayed references are zero-padded, so all parts have `len + L - 1` samples
//! and the Gram matrices are exactly block-Toeplitz.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::ExtractionResult;
use crate::roomsim::MixtureSet;

pub const DEFAULT_FILTER_LEN: usize = 512;
/// Interference power is floored at this fraction of the target power.
const INTERFERENCE_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interference: Vec<f64>,
    pub artifact: Vec<f64>,
}

impl Decomposition {
    pub fn sir_db(&self) -> Result<f64> {
        sir_db(&self.target, &self.interference)
    }

    pub fn sdr_db(&self) -> f64 {
        let noise: Vec<f64> = self
            .interference
            .iter()
            .zip(&self.artifact)
            .map(|(a, b)| a + b)
            .collect();
        ratio_db(energy(&self.target), energy(&noise))
    }

    pub fn sar_db(&self) -> f64 {
        let signal: Vec<f64> = self
            .target
            .iter()
            .zip(&self.interference)
            .map(|(a, b)| a + b)
            .collect();
        ratio_db(energy(&signal), energy(&self.artifact))
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    10.0 * (num / den.max(INTERFERENCE_FLOOR * num).max(f64::MIN_POSITIVE)).log10()
}

/// `10 log10(‖target‖² / ‖interference‖²)`, capped at 300 dB.
pub fn sir_db(target: &[f64], interference: &[f64]) -> Result<f64> {
    let t = energy(target);
    if t <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let i = energy(interference).max(INTERFERENCE_FLOOR * t);
    Ok(10.0 * (t / i).log10())
}

/// Cholesky factor of a Gram matrix, with a growing ridge if it is singular.
fn factor(gram: &DMatrix<f64>) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
    let n = gram.nrows();
    let mean_diag = (0..n).map(|i| gram[(i, i)]).sum::<f64>() / n as f64;
    let mut ridge = 0.0;
    loop {
        let mut g = gram.clone();
        for i in 0..n {
            g[(i, i)] += ridge;
        }
        if let Some(chol) = g.cholesky() {
            return chol;
        }
        ridge = if ridge == 0.0 { 1e-12 * mean_diag.max(f64::MIN_POSITIVE) } else { ridge * 10.0 };
    }
}

/// Least-squares projector onto the delayed copies of a target image and its
/// interferers. Building it costs the Gram factorizations; each
/// [`Projector::decompose`] call is then a few FFTs and triangular solves.
pub struct Projector {
    len: usize,
    filter_len: usize,
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    refs: Vec<Vec<Complex64>>,
    target_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    joint_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Projector {
    pub fn new(target_image: &[f64], interferer_images: &[Vec<f64>], filter_len: usize) -> Result<Self> {
        let n = target_image.len();
        if filter_len == 0 {
            return Err(Error::BadConfig("projection filter length must be positive".into()));
        }
        if interferer_images.iter().any(|i| i.len() != n) {
            return Err(Error::ShapeMismatch("reference images differ in length".into()));
        }
        if target_image.iter().all(|v| *v == 0.0) {
            return Err(Error::DegenerateTarget);
        }
        let nfft = (n + filter_len - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(nfft);
        let ifft = planner.plan_fft_inverse(nfft);
        let mut proj = Projector {
            len: n,
            filter_len,
            nfft,
            fft,
            ifft,
            refs: Vec::new(),
            target_chol: factor(&DMatrix::identity(1, 1)),
            joint_chol: None,
        };
        proj.refs = std::iter::once(target_image)
            .chain(interferer_images.iter().map(Vec::as_slice))
            .map(|r| proj.transform(r))
            .collect();

        let n_refs = proj.refs.len();
        let size = n_refs * filter_len;
        let mut gram = DMatrix::zeros(size, size);
        for i in 0..n_refs {
            for j in i..n_refs {
                let r = proj.correlate(&proj.refs[i], &proj.refs[j]);
                for a in 0..filter_len {
                    for b in 0..filter_len {
                        // <s_i delayed a, s_j delayed b> = Σ_m s_i[m] s_j[m + a - b]
                        let lag = (a as i64 - b as i64).rem_euclid(nfft as i64) as usize;
                        gram[(i * filter_len + a, j * filter_len + b)] = r[lag];
                        gram[(j * filter_len + b, i * filter_len + a)] = r[lag];
                    }
                }
            }
        }
        proj.target_chol = factor(&gram.view((0, 0), (filter_len, filter_len)).into_owned());
        if n_refs > 1 {
            proj.joint_chol = Some(factor(&gram));
        }
        Ok(proj)
    }

    fn transform(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.nfft, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf
    }

    /// `Σ_m a[m] b[m + lag]` for all lags (circular index).
    fn correlate(&self, a: &[Complex64], b: &[Complex64]) -> Vec<f64> {
        let mut prod: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
        self.ifft.process(&mut prod);
        prod.iter().map(|v| v.re / self.nfft as f64).collect()
    }

    fn project(&self, est: &[Complex64], n_refs: usize, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> Vec<f64> {
        let l = self.filter_len;
        let mut rhs = DVector::zeros(n_refs * l);
        for j in 0..n_refs {
            let r = self.correlate(&self.refs[j], est);
            for b in 0..l {
                rhs[j * l + b] = r[b];
            }
        }
        let coef = chol.solve(&rhs);
        let mut acc = vec![Complex64::new(0.0, 0.0); self.nfft];
        for j in 0..n_refs {
            let taps: Vec<f64> = (0..l).map(|b| coef[j * l + b]).collect();
            let filt = self.transform(&taps);
            for (a, (f, s)) in acc.iter_mut().zip(filt.iter().zip(&self.refs[j])) {
                *a += f * s;
            }
        }
        self.ifft.process(&mut acc);
        acc.iter()
            .take(self.len + l - 1)
            .map(|v| v.re / self.nfft as f64)
            .collect()
    }

    /// Splits `estimate` into target, interference and artifact parts.
    pub fn decompose(&self, estimate: &[f64]) -> Result<Decomposition> {
        if estimate.len() != self.len {
            return Err(Error::ShapeMismatch(format!(
                "estimate has {} samples, references {}",
                estimate.len(),
                self.len
            )));
        }
        let out_len = self.len + self.filter_len - 1;
        let est = self.transform(estimate);
        let target = self.project(&est, 1, &self.target_chol);
        let joint = match &self.joint_chol {
            Some(chol) => self.project(&est, self.refs.len(), chol),
            None => target.clone(),
        };
        let interference = joint.iter().zip(&target).map(|(j, t)| j - t).collect();
        let artifact = (0..out_len)
            .map(|i| estimate.get(i).copied().unwrap_or(0.0) - joint[i])
            .collect();
        Ok(Decomposition {
            target,
            interference,
            artifact,
        })
    }

    /// SIR of `estimate`, zero-padded or truncated to the reference length.
    pub fn sir_db(&self, estimate: &[f64]) -> Result<f64> {
        let mut est = estimate.to_vec();
        est.resize(self.len, 0.0);
        self.decompose(&est)?.sir_db()
    }
}

/// Splits `estimate` into target, interference and artifact parts.
pub fn decompose(
    estimate: &[f64],
    target_image: &[f64],
    interferer_images: &[Vec<f64>],
    filter_len: usize,
) -> Result<Decomposition> {
    if target_image.len() != estimate.len() {
        return Err(Error::ShapeMismatch("estimate and reference images differ in length".into()));
    }
    Projector::new(target_image, interferer_images, filter_len)?.decompose(estimate)
}

/// One evaluated trial. Serialized field names are part of the report format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario_id: String,
    pub algorithm: String,
    pub input_sir_db: f64,
    pub output_sir_db: f64,
    #[serde(rename = "sirimp_db")]
    pub sir_improvement_db: f64,
    pub success: bool,
    #[serde(rename = "runtime_s")]
    pub runtime_seconds: f64,
    pub iterations: usize,
}

impl EvalReport {
    pub fn new(
        scenario_id: impl Into<String>,
        algorithm: impl Into<String>,
        input_sir_db: f64,
        output_sir_db: f64,
        runtime_seconds: f64,
        iterations: usize,
    ) -> Self {
        let sir_improvement_db = output_sir_db - input_sir_db;
        EvalReport {
            scenario_id: scenario_id.into(),
            algorithm: algorithm.into(),
            input_sir_db,
            output_sir_db,
            sir_improvement_db,
            success: sir_improvement_db > 0.0,
            runtime_seconds,
            iterations,
        }
    }
}

/// Projector for source `soi_index` at microphone `ref_mic` of `truth`.
pub fn projector(truth: &MixtureSet, soi_index: usize, ref_mic: usize, filter_len: usize) -> Result<Projector> {
    if soi_index >= truth.images.len() {
        return Err(Error::Scenario(format!("soi index {soi_index} out of range")));
    }
    let channels = truth.mixture.num_channels();
    if ref_mic >= channels {
        return Err(Error::RefMicOutOfRange { ref_mic, channels });
    }
    let interferers: Vec<Vec<f64>> = truth
        .images
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != soi_index)
        .map(|(_, img)| img.channel(ref_mic))
        .collect();
    Projector::new(&truth.images[soi_index].channel(ref_mic), &interferers, filter_len)
}

/// Input and output SIR at `ref_mic` for an estimate of source `soi_index`.
pub fn input_output_sir(
    estimate: &[f64],
    truth: &MixtureSet,
    soi_index: usize,
    ref_mic: usize,
    filter_len: usize,
) -> Result<(f64, f64)> {
    let proj = projector(truth, soi_index, ref_mic, filter_len)?;
    Ok((proj.sir_db(&truth.mixture.channel(ref_mic))?, proj.sir_db(estimate)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub filter_len: usize,
    pub algorithm: String,
    pub scenario_id: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            filter_len: DEFAULT_FILTER_LEN,
            algorithm: "fastive".into(),
            scenario_id: String::new(),
        }
    }
}

pub fn evaluate(
    result: &ExtractionResult,
    truth: &MixtureSet,
    soi_index: usize,
    ref_mic: usize,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let (input, output) = input_output_sir(&result.audio.channel(0), truth, soi_index, ref_mic, opts.filter_len)?;
    Ok(EvalReport::new(
        opts.scenario_id.clone(),
        opts.algorithm.clone(),
        input,
        output,
        result.runtime_seconds,
        result.iterations_used,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean SIR improvement over successful trials; absent if none succeeded.
    pub mean_sirimp_success_db: Option<f64>,
    pub mean_sirimp_all_db: f64,
    pub mean_runtime_s: f64,
    pub mean_iterations: f64,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::EmptyReports);
    }
    let n = reports.len() as f64;
    let wins: Vec<&EvalReport> = reports.iter().filter(|r| r.success).collect();
    let mean_success = (!wins.is_empty())
        .then(|| wins.iter().map(|r| r.sir_improvement_db).sum::<f64>() / wins.len() as f64);
    Ok(Summary {
        trials: reports.len(),
        successes: wins.len(),
        success_rate: wins.len() as f64 / n,
        mean_sirimp_success_db: mean_success,
        mean_sirimp_all_db: reports.iter().map(|r| r.sir_improvement_db).sum::<f64>() / n,
        mean_runtime_s: reports.iter().map(|r| r.runtime_seconds).sum::<f64>() / n,
        mean_iterations: reports.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn db(x: &[f64], reference: &[f64]) -> f64 {
        10.0 * (energy(x) / energy(reference)).log10()
    }

    #[test]
    fn self_projection() {
        let t = white(4000, 1);
        let i = white(4000, 2);
        let d = decompose(&t, &t, &[i], 64).unwrap();
        for (a, b) in d.target.iter().zip(&t) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(db(&d.interference, &t) <= -100.0);
        assert!(db(&d.artifact, &t) <= -100.0);
        assert!(d.sir_db().unwrap() > 100.0);
    }

    #[test]
    fn delayed_target_is_target() {
        let mut t = white(3000, 3);
        t[2990..].iter_mut().for_each(|v| *v = 0.0);
        let mut est = vec![0.0; 3000];
        for n in 3..3000 {
            est[n] = 2.0 * t[n - 3];
        }
        let d = decompose(&est, &t, &[white(3000, 4)], 16).unwrap();
        assert!(db(&d.interference, &est) <= -100.0);
        assert!(db(&d.artifact, &est) <= -100.0);
    }

    #[test]
    fn known_power_ratio() {
        let t = white(20_000, 5);
        let i = white(20_000, 6);
        let est: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + 0.1 * b).collect();
        // sample-power oracle for the expected ratio
        let oracle = 10.0 * (energy(&t) / (0.01 * energy(&i))).log10();
        assert!((oracle - 20.0).abs() < 0.2);
        let sir = decompose(&est, &t, &[i], 1).unwrap().sir_db().unwrap();
        assert!((sir - 20.0).abs() <= 0.2, "{sir}");
    }

    #[test]
    fn parts_complete_and_orthogonal() {
        let t = white(5000, 7);
        let i1 = white(5000, 8);
        let i2 = white(5000, 9);
        let noise = white(5000, 10);
        let est: Vec<f64> = (0..5000)
            .map(|n| t[n] + 0.3 * i1[n] - 0.2 * if n > 2 { i2[n - 2] } else { 0.0 } + 0.05 * noise[n])
            .collect();
        let d = decompose(&est, &t, &[i1, i2], 8).unwrap();
        let len = est.len() + 7;
        let scale = energy(&est).sqrt();
        for n in 0..len {
            let orig = est.get(n).copied().unwrap_or(0.0);
            let sum = d.target[n] + d.interference[n] + d.artifact[n];
            assert!((sum - orig).abs() <= 1e-9 * scale);
        }
        let nt = energy(&d.target).sqrt();
        for other in [&d.interference, &d.artifact] {
            let cos = dot(&d.target, other) / (nt * energy(other).sqrt());
            assert!(cos.abs() <= 1e-8, "{cos}");
        }
        assert!(d.sdr_db() < d.sir_db().unwrap());
        assert!(d.sar_db().is_finite());
    }

    #[test]
    fn sir_edge_cases() {
        assert_eq!(sir_db(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((sir_db(&[1.0], &[0.0]).unwrap() - 300.0).abs() < 1e-9);
        assert!((sir_db(&[1.0], &[0.1]).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(sir_db(&[0.0], &[1.0]), Err(Error::DegenerateTarget)));
        assert!(matches!(decompose(&[1.0, 2.0], &[0.0, 0.0], &[], 1), Err(Error::DegenerateTarget)));
    }

    #[test]
    fn scaling_the_estimate_keeps_sir() {
        let t = white(3000, 11);
        let i = white(3000, 12);
        let est: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + 0.4 * b).collect();
        let base = decompose(&est, &t, &[i.clone()], 4).unwrap().sir_db().unwrap();
        for s in [-3.0, 0.01, 250.0] {
            let scaled: Vec<f64> = est.iter().map(|v| v * s).collect();
            let sir = decompose(&scaled, &t, &[i.clone()], 4).unwrap().sir_db().unwrap();
            assert!((sir - base).abs() < 1e-8);
        }
    }

    #[test]
    fn more_interference_never_raises_sir() {
        let t = white(3000, 13);
        let i = white(3000, 14);
        let mut last = f64::INFINITY;
        for g in [0.0, 0.05, 0.2, 0.5, 1.0, 3.0] {
            let est: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + g * b).collect();
            let sir = decompose(&est, &t, &[i.clone()], 4).unwrap().sir_db().unwrap();
            assert!(sir <= last + 1e-9);
            last = sir;
        }
    }

    #[test]
    fn report_invariants() {
        let r = EvalReport::new("s", "fastive-t", 5.0, 5.0, 0.1, 3);
        assert_eq!(r.sir_improvement_db, 0.0);
        assert!(!r.success);
        let r = EvalReport::new("s", "fastive-t", 5.0, 12.5, 0.1, 3);
        assert_eq!(r.sir_improvement_db, 7.5);
        assert!(r.success);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["scenario_id", "algorithm", "input_sir_db", "output_sir_db", "sirimp_db", "success", "runtime_s", "iterations"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    fn report(sirimp: f64) -> EvalReport {
        EvalReport::new("x", "a", 0.0, sirimp, 1.0, 10)
    }

    #[test]
    fn aggregation() {
        let s = aggregate(&[report(-1.0), report(-2.0)]).unwrap();
        assert_eq!(s.success_rate, 0.0);
        assert_eq!(s.mean_sirimp_success_db, None);

        let s = aggregate(&[report(2.0), report(4.0)]).unwrap();
        assert_eq!(s.mean_sirimp_success_db, Some(3.0));
        assert_eq!(s.success_rate, 1.0);

        let s = aggregate(&[report(-1.0), report(5.0)]).unwrap();
        assert_eq!(s.mean_sirimp_success_db, Some(5.0));
        assert_eq!(s.success_rate, 0.5);
        assert_eq!(s.mean_sirimp_all_db, 2.0);

        assert!(matches!(aggregate(&[]), Err(Error::EmptyReports)));
    }
}
