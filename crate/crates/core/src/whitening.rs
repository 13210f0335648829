//! Per-bin spatial covariance and the PCA whitening transform.
//!
//! For every bin the mixture covariance `C = U diag(d) U^H` is decomposed and
//! the mixture is mapped to `x̃ = diag(d)^{-1/2} U^H x`. Components come out in
//! order of decreasing power, so the first whitened channel is the one
//! dominated by the loudest source.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig, HermitianEig};
use crate::stft::Spectrogram;
use crate::C64;

/// Relative diagonal loading applied before the eigendecomposition.
pub const REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBank {
    /// One `M × M` Hermitian matrix per bin.
    pub cov: Vec<Array2<C64>>,
    pub frame_count: usize,
}

impl CovarianceBank {
    pub fn num_bins(&self) -> usize {
        self.cov.len()
    }

    pub fn num_channels(&self) -> usize {
        self.cov.first().map_or(0, Array2::nrows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningBank {
    /// Columns are eigenvectors, in order of decreasing eigenvalue.
    pub eigvecs: Vec<Array2<C64>>,
    /// Regularized eigenvalues, non-increasing.
    pub eigvals: Vec<Array1<f64>>,
    /// `R × M` whitening matrices `Q = diag(d_1..R)^{-1/2} U_{1..R}^H`.
    pub whitener: Vec<Array2<C64>>,
    pub rank: usize,
    /// False for silent bins (zero covariance); their whitener is all zeros.
    pub active: Vec<bool>,
}

impl WhiteningBank {
    pub fn num_bins(&self) -> usize {
        self.whitener.len()
    }

    pub fn num_channels(&self) -> usize {
        self.whitener.first().map_or(0, Array2::ncols)
    }
}

/// Sample covariance `C^k = (1/T) Σ_t x_t x_t^H` for every bin.
pub fn estimate_covariance(spec: &Spectrogram) -> Result<CovarianceBank> {
    let (bins, frames, channels) = spec.data.dim();
    if frames < 2 {
        return Err(Error::InsufficientFrames(frames));
    }
    let norm = 1.0 / frames as f64;
    let cov = (0..bins)
        .map(|k| {
            let mut c = Array2::<C64>::zeros((channels, channels));
            for t in 0..frames {
                for i in 0..channels {
                    let xi = spec.data[[k, t, i]];
                    for j in i..channels {
                        c[[i, j]] += xi * spec.data[[k, t, j]].conj();
                    }
                }
            }
            for i in 0..channels {
                c[[i, i]] = C64::new(c[[i, i]].re * norm, 0.0);
                for j in i + 1..channels {
                    c[[i, j]] *= norm;
                    c[[j, i]] = c[[i, j]].conj();
                }
            }
            c
        })
        .collect();
    Ok(CovarianceBank {
        cov,
        frame_count: frames,
    })
}

/// Builds the per-bin whitening transforms keeping the `rank` strongest
/// components.
pub fn build_whitener(cov: &CovarianceBank, rank: usize) -> Result<WhiteningBank> {
    let m = cov.num_channels();
    if rank == 0 || rank > m {
        return Err(Error::RankOutOfBounds { rank, channels: m });
    }
    let mut bank = WhiteningBank {
        eigvecs: Vec::with_capacity(cov.num_bins()),
        eigvals: Vec::with_capacity(cov.num_bins()),
        whitener: Vec::with_capacity(cov.num_bins()),
        rank,
        active: Vec::with_capacity(cov.num_bins()),
    };
    for c in &cov.cov {
        let trace: f64 = (0..m).map(|i| c[[i, i]].re).sum();
        if !(trace > 0.0 && trace.is_finite()) {
            bank.eigvecs.push(Array2::eye(m));
            bank.eigvals.push(Array1::zeros(m));
            bank.whitener.push(Array2::zeros((rank, m)));
            bank.active.push(false);
            continue;
        }
        let mut loaded = c.clone();
        let load = REGULARIZATION * trace / m as f64;
        for i in 0..m {
            loaded[[i, i]] += load;
        }
        let HermitianEig { vectors, values } = hermitian_eig(&loaded)?;
        let q = Array2::from_shape_fn((rank, m), |(r, j)| {
            vectors[[j, r]].conj() / values[r].max(load).sqrt()
        });
        bank.eigvecs.push(vectors);
        bank.eigvals.push(values);
        bank.whitener.push(q);
        bank.active.push(true);
    }
    Ok(bank)
}

/// `x̃_t^k = Q^k x_t^k`; the output has `rank` channels.
pub fn apply_whitener(spec: &Spectrogram, bank: &WhiteningBank) -> Result<Spectrogram> {
    let (bins, frames, channels) = spec.data.dim();
    if bank.num_bins() != bins || bank.num_channels() != channels {
        return Err(Error::ShapeMismatch(format!(
            "whitener is {} bins x {} channels, spectrogram is {} x {}",
            bank.num_bins(),
            bank.num_channels(),
            bins,
            channels
        )));
    }
    let r = bank.rank;
    let mut out = Array3::zeros((bins, frames, r));
    for k in 0..bins {
        let q = &bank.whitener[k];
        for t in 0..frames {
            for i in 0..r {
                let mut acc = C64::new(0.0, 0.0);
                for j in 0..channels {
                    acc += q[[i, j]] * spec.data[[k, t, j]];
                }
                out[[k, t, i]] = acc;
            }
        }
    }
    spec.with_data(out)
}
