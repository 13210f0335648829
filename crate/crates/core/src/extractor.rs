//! Fast fixed-point independent vector extraction of the dominant source.
//!
//! Works on the whitened spectrogram `x̃` (see [`crate::whitening`]). A single
//! demixing vector `w^k` per bin, started at `e_1` (the strongest principal
//! component), is refined with the Newton-type update
//!
//! ```text
//! y_t^k = (w^k)^H x̃_t^k,          r_t = Σ_k |y_t^k|²
//! a^k   = Ẽ_t[G'(r_t) + |y_t^k|² G''(r_t)]
//! b^k   = Ẽ_t[conj(y_t^k) G'(r_t) x̃_t^k]
//! w^k  <- (a^k w^k - b^k) / ‖a^k w^k - b^k‖
//! ```
//!
//! where `Ẽ_t` is the plain mean over frames, leaving out frames that are zero
//! in every bin. All bins use the frame norms `r_t` of the current iterate, so
//! bins update simultaneously. After convergence the vector is mapped back to
//! the microphone domain and scaled by the estimated mixing coefficient at a
//! reference microphone, which makes the output the source image seen by that
//! microphone.

use std::time::Instant;

use log::warn;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{Contrast, ContrastModel};
use crate::stft::{self, AudioBuffer, Spectrogram, StftConfig};
use crate::whitening::{self, CovarianceBank, WhiteningBank};
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Stop once `max_k (1 - |<w_new^k, w_old^k>|)` falls below this.
    pub tol: f64,
    pub ref_mic: usize,
    pub prior: ContrastModel,
    /// Retained whitening components; `None` keeps all channels.
    pub rank: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 100,
            tol: 1e-6,
            ref_mic: 0,
            prior: ContrastModel::default(),
            rank: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::BadConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::BadConfig(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemixState {
    /// `K × R` demixing vectors in the whitened domain, one row per bin.
    pub w: Array2<C64>,
    /// `K × M` microphone-domain demixing vectors, set by [`back_project`].
    pub w_effective: Option<Array2<C64>>,
    pub iteration: usize,
    pub converged: bool,
    /// Cost after each iteration.
    pub cost_history: Vec<f64>,
    /// Largest `1 - |<w_new, w_old>|` over bins in the last iteration.
    pub last_change: f64,
}

impl DemixState {
    pub fn num_bins(&self) -> usize {
        self.w.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionResult {
    /// Single-channel estimate of the dominant source image at `ref_mic`.
    pub audio: AudioBuffer,
    pub state: DemixState,
    /// Wall-clock time of solve, back-projection and rescaling.
    pub runtime_seconds: f64,
    pub iterations_used: usize,
}

/// Per-bin quantities of one fixed-point step.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointTerms {
    /// `a^k = Ẽ[G'(r) + |y^k|² G''(r)]`.
    pub a: Array1<f64>,
    /// `b^k = Ẽ[conj(y^k) G'(r) x̃^k]`, rows are bins.
    pub b: Array2<C64>,
}

/// Whitened data split into real and imaginary planes, frames contiguous for
/// each (bin, channel) pair so the inner loops vectorize.
struct Planar {
    re: Vec<f64>,
    im: Vec<f64>,
    bins: usize,
    frames: usize,
    rank: usize,
}

impl Planar {
    fn new(data: &Array3<C64>) -> Self {
        let (bins, frames, rank) = data.dim();
        let mut re = vec![0.0; bins * frames * rank];
        let mut im = vec![0.0; bins * frames * rank];
        for ((k, t, i), v) in data.indexed_iter() {
            let at = (k * rank + i) * frames + t;
            re[at] = v.re;
            im[at] = v.im;
        }
        Planar {
            re,
            im,
            bins,
            frames,
            rank,
        }
    }

    fn channel(&self, k: usize, i: usize) -> (&[f64], &[f64]) {
        let at = (k * self.rank + i) * self.frames;
        (&self.re[at..at + self.frames], &self.im[at..at + self.frames])
    }
}

/// Demixed outputs `y_t^k` (bin-major planes) and the frame norms `r_t`.
struct Outputs {
    re: Vec<f64>,
    im: Vec<f64>,
    r: Vec<f64>,
}

impl Outputs {
    fn zeros(bins: usize, frames: usize) -> Self {
        Outputs {
            re: vec![0.0; bins * frames],
            im: vec![0.0; bins * frames],
            r: vec![0.0; frames],
        }
    }

    fn bin(&self, k: usize) -> (&[f64], &[f64]) {
        let n = self.r.len();
        (&self.re[k * n..(k + 1) * n], &self.im[k * n..(k + 1) * n])
    }

    /// Writes `y^k = (w^k)^H x̃^k` and adds `|y^k|²` to the frame norms.
    fn fill_bin(&mut self, x: &Planar, k: usize, w: &[C64]) {
        let n = x.frames;
        let (yr, yi) = (&mut self.re[k * n..(k + 1) * n], &mut self.im[k * n..(k + 1) * n]);
        yr.fill(0.0);
        yi.fill(0.0);
        for (i, wi) in w.iter().enumerate() {
            let (xr, xi) = x.channel(k, i);
            let (a, b) = (wi.re, wi.im);
            for t in 0..n {
                yr[t] += a * xr[t] + b * xi[t];
                yi[t] += a * xi[t] - b * xr[t];
            }
        }
        // fixed k-ascending order per frame keeps r_t bit-reproducible
        for ((rt, &a), &b) in self.r.iter_mut().zip(yr.iter()).zip(yi.iter()) {
            *rt += a * a + b * b;
        }
    }
}

fn check_shapes(white: &Spectrogram, w: &Array2<C64>) -> Result<()> {
    let (bins, _, rank) = white.data.dim();
    if w.dim() != (bins, rank) {
        return Err(Error::ShapeMismatch(format!(
            "demixing state is {:?}, whitened spectrogram has {} bins x {} channels",
            w.dim(),
            bins,
            rank
        )));
    }
    Ok(())
}

fn outputs(x: &Planar, w: &Array2<C64>) -> Outputs {
    let mut out = Outputs::zeros(x.bins, x.frames);
    for k in 0..x.bins {
        out.fill_bin(x, k, &w.row(k).to_vec());
    }
    out
}

fn cost_from_norms<C: Contrast>(r: &[f64], live: &[bool], prior: &C) -> f64 {
    let count = live.iter().filter(|&&l| l).count();
    if count == 0 {
        return 0.0;
    }
    -r.iter().zip(live).filter(|(_, &l)| l).map(|(&z, _)| prior.value(z)).sum::<f64>() / count as f64
}

/// Sums `f(t)` over `0..n` with four interleaved accumulators.
#[inline]
fn sum4(n: usize, f: impl Fn(usize) -> (f64, f64)) -> (f64, f64) {
    let mut acc = [(0.0, 0.0); 4];
    let whole = n - n % 4;
    for t in (0..whole).step_by(4) {
        for (j, a) in acc.iter_mut().enumerate() {
            let (u, v) = f(t + j);
            a.0 += u;
            a.1 += v;
        }
    }
    for t in whole..n {
        let (u, v) = f(t);
        acc[0].0 += u;
        acc[0].1 += v;
    }
    (
        (acc[0].0 + acc[1].0) + (acc[2].0 + acc[3].0),
        (acc[0].1 + acc[1].1) + (acc[2].1 + acc[3].1),
    )
}

/// Per-frame scratch shared by the bins of one step.
struct Scratch {
    cr: Vec<f64>,
    ci: Vec<f64>,
}

/// Writes `b^k` into `bk` for one bin and returns `a^k`, both scaled by `norm`.
#[allow(clippy::too_many_arguments)]
fn bin_terms(
    x: &Planar,
    k: usize,
    out: &Outputs,
    g1: &[f64],
    g2: &[f64],
    norm: f64,
    scratch: &mut Scratch,
    bk: &mut [C64],
) -> f64 {
    let n = x.frames;
    let (yr, yi) = out.bin(k);
    let (ak, _) = sum4(n, |t| (g1[t] + (yr[t] * yr[t] + yi[t] * yi[t]) * g2[t], 0.0));
    // conj(y) G'(r)
    for t in 0..n {
        scratch.cr[t] = yr[t] * g1[t];
        scratch.ci[t] = -yi[t] * g1[t];
    }
    let (cr, ci) = (&scratch.cr, &scratch.ci);
    for (i, b) in bk.iter_mut().enumerate() {
        let (xr, xi) = x.channel(k, i);
        let (re, im) = sum4(n, |t| (cr[t] * xr[t] - ci[t] * xi[t], cr[t] * xi[t] + ci[t] * xr[t]));
        *b = C64::new(re * norm, im * norm);
    }
    ak * norm
}

fn prior_weights<C: Contrast>(r: &[f64], live: &[bool], prior: &C) -> (Vec<f64>, Vec<f64>, f64) {
    let g1 = r.iter().zip(live).map(|(&z, &l)| if l { prior.first(z) } else { 0.0 }).collect();
    let g2 = r.iter().zip(live).map(|(&z, &l)| if l { prior.second(z) } else { 0.0 }).collect();
    let norm = 1.0 / live.iter().filter(|&&l| l).count().max(1) as f64;
    (g1, g2, norm)
}

fn terms_from_outputs<C: Contrast>(x: &Planar, out: &Outputs, live: &[bool], prior: &C) -> FixedPointTerms {
    let (g1, g2, norm) = prior_weights(&out.r, live, prior);
    let mut scratch = Scratch {
        cr: vec![0.0; x.frames],
        ci: vec![0.0; x.frames],
    };
    let mut a = Array1::zeros(x.bins);
    let mut b = Array2::zeros((x.bins, x.rank));
    let mut bk = vec![C64::new(0.0, 0.0); x.rank];
    for k in 0..x.bins {
        a[k] = bin_terms(x, k, out, &g1, &g2, norm, &mut scratch, &mut bk);
        b.row_mut(k).iter_mut().zip(&bk).for_each(|(d, v)| *d = *v);
    }
    FixedPointTerms { a, b }
}

/// `w <- (a w - b) / ‖a w - b‖` in place; returns `1 - |<w_new, w_old>|`.
fn update_bin(k: usize, w: &mut [C64], a: f64, b: &[C64]) -> Result<f64> {
    let mut norm = 0.0;
    let old: Vec<C64> = w.to_vec();
    for (wi, bi) in w.iter_mut().zip(b) {
        *wi = *wi * a - bi;
        norm += wi.norm_sqr();
    }
    let norm = norm.sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateUpdate(k));
    }
    let mut inner = C64::new(0.0, 0.0);
    for (wi, oi) in w.iter_mut().zip(&old) {
        *wi /= norm;
        inner += oi.conj() * *wi;
    }
    Ok(1.0 - inner.norm())
}

/// One full fixed-point step. Each bin is updated as soon as its terms are
/// known and its new outputs are formed while its data are still in cache.
fn step<C: Contrast>(
    x: &Planar,
    w: &Array2<C64>,
    out: &Outputs,
    active: &[bool],
    live: &[bool],
    prior: &C,
) -> Result<(Array2<C64>, Outputs, f64)> {
    let (g1, g2, norm) = prior_weights(&out.r, live, prior);
    let mut scratch = Scratch {
        cr: vec![0.0; x.frames],
        ci: vec![0.0; x.frames],
    };
    let mut next = w.as_standard_layout().into_owned();
    let mut fresh = Outputs::zeros(x.bins, x.frames);
    let mut bk = vec![C64::new(0.0, 0.0); x.rank];
    let mut change = 0.0_f64;
    for k in 0..x.bins {
        let row = next.row_mut(k).into_slice().expect("row-major");
        // silent bins carry no information; keep their vector
        if active[k] {
            let ak = bin_terms(x, k, out, &g1, &g2, norm, &mut scratch, &mut bk);
            change = change.max(update_bin(k, row, ak, &bk)?);
        }
        fresh.fill_bin(x, k, row);
    }
    Ok((next, fresh, change))
}

fn active_bins(data: &Array3<C64>) -> Vec<bool> {
    data.outer_iter()
        .map(|bin| bin.iter().any(|v| v.norm_sqr() > 0.0))
        .collect()
}

/// Frames with any nonzero whitened sample. All-zero frames give `y = 0` for
/// every `w` and are left out of the frame averages.
fn live_frames(data: &Array3<C64>) -> Vec<bool> {
    let (bins, frames, rank) = data.dim();
    (0..frames)
        .map(|t| (0..bins).any(|k| (0..rank).any(|i| data[[k, t, i]].norm_sqr() > 0.0)))
        .collect()
}

/// One-hot start `w^k = e_1` for every bin.
pub fn initialize(bank: &WhiteningBank) -> DemixState {
    initial_state(bank.num_bins(), bank.rank)
}

pub fn initial_state(bins: usize, rank: usize) -> DemixState {
    let mut w = Array2::zeros((bins, rank));
    if rank > 0 {
        w.column_mut(0).fill(C64::new(1.0, 0.0));
    }
    DemixState {
        w,
        w_effective: None,
        iteration: 0,
        converged: false,
        cost_history: Vec::new(),
        last_change: f64::INFINITY,
    }
}

/// `-Ẽ_t[G(Σ_k |(w^k)^H x̃_t^k|²)]`.
pub fn evaluate_cost<C: Contrast>(white: &Spectrogram, state: &DemixState, prior: &C) -> Result<f64> {
    check_shapes(white, &state.w)?;
    let x = Planar::new(&white.data);
    Ok(cost_from_norms(&outputs(&x, &state.w).r, &live_frames(&white.data), prior))
}

/// The per-bin terms of the update at the current iterate. The Wirtinger
/// gradient of [`evaluate_cost`] with respect to `conj(w^k)` is `-b^k`.
pub fn fixed_point_terms<C: Contrast>(
    white: &Spectrogram,
    state: &DemixState,
    prior: &C,
) -> Result<FixedPointTerms> {
    check_shapes(white, &state.w)?;
    let x = Planar::new(&white.data);
    let out = outputs(&x, &state.w);
    Ok(terms_from_outputs(&x, &out, &live_frames(&white.data), prior))
}

/// One fixed-point step followed by normalization.
pub fn iterate_once<C: Contrast>(white: &Spectrogram, state: &DemixState, prior: &C) -> Result<DemixState> {
    check_shapes(white, &state.w)?;
    let x = Planar::new(&white.data);
    let out = outputs(&x, &state.w);
    let live = live_frames(&white.data);
    let (w, next, change) = step(&x, &state.w, &out, &active_bins(&white.data), &live, prior)?;
    let cost = cost_from_norms(&next.r, &live, prior);
    let mut cost_history = state.cost_history.clone();
    cost_history.push(cost);
    Ok(DemixState {
        w,
        w_effective: None,
        iteration: state.iteration + 1,
        converged: state.converged,
        cost_history,
        last_change: change,
    })
}

/// Runs [`iterate_once`] from the one-hot start until the directional change
/// drops below `config.tol` or `config.max_iter` is reached.
pub fn solve(white: &Spectrogram, config: &SolverConfig) -> Result<DemixState> {
    config.validate()?;
    let (bins, _, rank) = white.data.dim();
    solve_from(white, initial_state(bins, rank), config.max_iter, config.tol, &config.prior)
}

/// Same loop as [`solve`] from an arbitrary start and with any contrast.
pub fn solve_from<C: Contrast>(
    white: &Spectrogram,
    mut state: DemixState,
    max_iter: usize,
    tol: f64,
    prior: &C,
) -> Result<DemixState> {
    check_shapes(white, &state.w)?;
    let data = &white.data;
    let active = active_bins(data);
    let live = live_frames(data);
    let x = Planar::new(data);
    let mut out = outputs(&x, &state.w);
    for _ in 0..max_iter {
        let (w, next, change) = step(&x, &state.w, &out, &active, &live, prior)?;
        out = next;
        state.w = w;
        state.iteration += 1;
        state.cost_history.push(cost_from_norms(&out.r, &live, prior));
        state.last_change = change;
        if change < tol {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

/// `w_eff^k = (Q^k)^H w^k`, so that `(w_eff^k)^H x^k = (w^k)^H x̃^k`.
pub fn back_project(state: &DemixState, bank: &WhiteningBank) -> Result<DemixState> {
    if state.num_bins() != bank.num_bins() || state.rank() != bank.rank {
        return Err(Error::RankOutOfBounds {
            rank: state.rank(),
            channels: bank.rank,
        });
    }
    let m = bank.num_channels();
    let mut eff = Array2::zeros((state.num_bins(), m));
    for (k, q) in bank.whitener.iter().enumerate() {
        for j in 0..m {
            let mut acc = C64::new(0.0, 0.0);
            for r in 0..bank.rank {
                acc += q[[r, j]].conj() * state.w[[k, r]];
            }
            eff[[k, j]] = acc;
        }
    }
    let mut next = state.clone();
    next.w_effective = Some(eff);
    Ok(next)
}

fn effective(state: &DemixState) -> Result<&Array2<C64>> {
    state
        .w_effective
        .as_ref()
        .ok_or_else(|| Error::BadConfig("demixing state has not been back-projected".into()))
}

/// Mixing vector of the extracted source, `h^k = C^k w^k / ((w^k)^H C^k w^k)`,
/// using the microphone-domain covariance and back-projected vectors.
///
/// Silent bins (zero covariance trace) get a zero vector.
pub fn estimate_mixing_vector(cov: &CovarianceBank, state: &DemixState) -> Result<Array2<C64>> {
    let eff = effective(state)?;
    let m = cov.num_channels();
    if eff.dim() != (cov.num_bins(), m) {
        return Err(Error::ShapeMismatch(format!(
            "covariance bank is {} x {}, demixing vectors are {:?}",
            cov.num_bins(),
            m,
            eff.dim()
        )));
    }
    let mut h = Array2::zeros((cov.num_bins(), m));
    for (k, c) in cov.cov.iter().enumerate() {
        let trace: f64 = (0..m).map(|i| c[[i, i]].re).sum();
        if trace <= 0.0 {
            continue;
        }
        let w = eff.row(k);
        let cw: Vec<C64> = (0..m)
            .map(|i| (0..m).map(|j| c[[i, j]] * w[j]).sum())
            .collect();
        let denom: f64 = (0..m).map(|i| (w[i].conj() * cw[i]).re).sum();
        if !(denom > 1e-30 * trace) {
            return Err(Error::DegenerateOutputPower(k));
        }
        for i in 0..m {
            h[[k, i]] = cw[i] / denom;
        }
    }
    Ok(h)
}

/// Scales each bin's microphone-domain vector by `conj(h^k[ref_mic])` so the
/// output equals `h^k[ref_mic] · y^k`, the source image at the reference
/// microphone. Returns the new state and the bins left unscaled because the
/// source is nearly unobservable there.
pub fn rescale(state: &DemixState, h: &Array2<C64>, ref_mic: usize) -> Result<(DemixState, Vec<usize>)> {
    let eff = effective(state)?;
    let m = eff.ncols();
    if ref_mic >= m {
        return Err(Error::RefMicOutOfRange { ref_mic, channels: m });
    }
    if h.dim() != eff.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mixing vectors are {:?}, demixing vectors are {:?}",
            h.dim(),
            eff.dim()
        )));
    }
    let mut scaled = eff.clone();
    let mut skipped = Vec::new();
    for k in 0..h.nrows() {
        let norm = h.row(k).iter().map(C64::norm_sqr).sum::<f64>().sqrt();
        if norm == 0.0 {
            scaled.row_mut(k).fill(C64::new(0.0, 0.0));
            continue;
        }
        let href = h[[k, ref_mic]];
        if href.norm() < 1e-12 * norm {
            skipped.push(k);
            continue;
        }
        scaled.row_mut(k).mapv_inplace(|v| v * href.conj());
    }
    if !skipped.is_empty() {
        warn!(
            "SOI nearly unobservable at reference mic {ref_mic} in {} bins; left unscaled",
            skipped.len()
        );
    }
    let mut next = state.clone();
    next.w_effective = Some(scaled);
    Ok((next, skipped))
}

/// Single-channel spectrogram `y_t^k = (w^k)^H x_t^k`.
pub fn apply_demixing(spec: &Spectrogram, w: &Array2<C64>) -> Result<Spectrogram> {
    let (bins, frames, channels) = spec.data.dim();
    if w.dim() != (bins, channels) {
        return Err(Error::ShapeMismatch(format!(
            "demixing vectors are {:?}, spectrogram has {bins} bins x {channels} channels",
            w.dim()
        )));
    }
    let mut out = Array3::zeros((bins, frames, 1));
    for k in 0..bins {
        for t in 0..frames {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..channels {
                acc += w[[k, j]].conj() * spec.data[[k, t, j]];
            }
            out[[k, t, 0]] = acc;
        }
    }
    spec.with_data(out)
}

/// Full pipeline: STFT, whitening, fixed-point solve, back-projection,
/// rescaling to the reference microphone and inverse STFT.
pub fn extract(audio: &AudioBuffer, config: &SolverConfig, stft_config: &StftConfig) -> Result<ExtractionResult> {
    config.validate()?;
    let m = audio.num_channels();
    if m < 2 {
        return Err(Error::TooFewChannels(m));
    }
    if config.ref_mic >= m {
        return Err(Error::RefMicOutOfRange {
            ref_mic: config.ref_mic,
            channels: m,
        });
    }
    let spec = stft::analyze(audio, stft_config)?;
    let cov = whitening::estimate_covariance(&spec)?;
    let bank = whitening::build_whitener(&cov, config.rank.unwrap_or(m))?;
    let white = whitening::apply_whitener(&spec, &bank)?;

    let started = Instant::now();
    let state = solve(&white, config)?;
    let state = back_project(&state, &bank)?;
    let h = estimate_mixing_vector(&cov, &state)?;
    let (state, _) = rescale(&state, &h, config.ref_mic)?;
    let runtime_seconds = started.elapsed().as_secs_f64();

    let demixed = apply_demixing(&spec, effective(&state)?)?;
    let audio = stft::synthesize(&demixed)?;
    Ok(ExtractionResult {
        audio,
        iterations_used: state.iteration,
        state,
        runtime_seconds,
    })
}
