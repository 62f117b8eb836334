//! Source-to-distortion, interference, and artifact ratios.
//!
//! The estimate is split into a target part (its least-squares projection
//! onto `L` delayed copies of the target reference), an interference part
//! (the extra captured by delayed copies of all references), and the
//! remaining artifacts. References and estimate are zero-padded by `L - 1`
//! samples, so every component has `N + L - 1` samples.

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FILTER_LENGTH: usize = 512;

/// Relative diagonal loading of the Gram matrices.
const RIDGE: f64 = 1e-10;

/// Denominators below this fraction of the numerator count as zero.
const ZERO_RATIO: f64 = 1e-20;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least one reference")]
    NoReferences,
    #[error("filter length must be at least 1")]
    ZeroFilter,
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference {0} is silent")]
    SilentReference(usize),
    #[error("target index {index} out of range for {count} references")]
    BadTarget { index: usize, count: usize },
    #[error("target and residual are both zero; ratios are undefined")]
    Undefined,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    /// A Gram system was close to singular and leaned on the ridge term.
    pub rank_deficient: bool,
}

/// Cholesky factor of a symmetric positive definite matrix (row-major, lower).
struct Cholesky {
    n: usize,
    /// The unregularized matrix, kept for iterative refinement.
    a: Vec<f64>,
    l: Vec<f64>,
    deficient: bool,
}

impl Cholesky {
    fn factor(orig: Vec<f64>, n: usize) -> Self {
        let mut a = orig.clone();
        let mean_diag = (0..n).map(|i| a[i * n + i]).sum::<f64>() / n as f64;
        let ridge = RIDGE * mean_diag;
        let mut deficient = false;
        for i in 0..n {
            a[i * n + i] += ridge;
        }
        for j in 0..n {
            let row_j = &a[j * n..j * n + j];
            let mut d = a[j * n + j] - row_j.iter().map(|v| v * v).sum::<f64>();
            if d <= 1e-12 * mean_diag {
                deficient = true;
                d = d.max(ridge).max(f64::MIN_POSITIVE);
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let (upper, lower) = a.split_at_mut(i * n);
                let rj = &upper[j * n..j * n + j];
                let ri = &mut lower[..=j];
                let dot: f64 = ri[..j].iter().zip(rj).map(|(x, y)| x * y).sum();
                ri[j] = (ri[j] - dot) / d;
            }
        }
        Self {
            n,
            a: orig,
            l: a,
            deficient,
        }
    }

    /// Solve, then refine against the unregularized matrix so the ridge does
    /// not bias well-conditioned systems.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.solve_factored(b);
        if self.deficient {
            return x;
        }
        let n = self.n;
        for _ in 0..2 {
            let r: Vec<f64> = (0..n)
                .map(|i| {
                    let row = &self.a[i * n..(i + 1) * n];
                    b[i] - row.iter().zip(&x).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect();
            for (x, d) in x.iter_mut().zip(self.solve_factored(&r)) {
                *x += d;
            }
        }
        x
    }

    fn solve_factored(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Precomputed spectra and Gram factorizations for one set of references.
pub struct Projector {
    len: usize,
    filter: usize,
    nfft: usize,
    spectra: Vec<Vec<Complex64>>,
    /// Cross-correlations `xc[i][j][k] = Σ_t r_i(t) r_j(t + k)` (circular index).
    xcorr: Vec<Vec<Vec<f64>>>,
    full: Cholesky,
    planner: FftPlanner<f64>,
}

impl Projector {
    pub fn new(references: &[&[f64]], filter_length: usize) -> Result<Self> {
        let k = references.len();
        if k == 0 {
            return Err(MetricsError::NoReferences);
        }
        if filter_length == 0 {
            return Err(MetricsError::ZeroFilter);
        }
        let len = references[0].len();
        for (j, r) in references.iter().enumerate() {
            if r.len() != len {
                return Err(MetricsError::LengthMismatch(len, r.len()));
            }
            if r.iter().all(|&v| v == 0.0) {
                return Err(MetricsError::SilentReference(j));
            }
        }
        let nfft = (len + filter_length - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let spectra: Vec<Vec<Complex64>> = references
            .iter()
            .map(|r| forward(&mut planner, r, nfft))
            .collect();
        let mut xcorr = vec![vec![Vec::new(); k]; k];
        for i in 0..k {
            for j in i..k {
                let prod: Vec<Complex64> = spectra[i]
                    .iter()
                    .zip(&spectra[j])
                    .map(|(a, b)| a.conj() * b)
                    .collect();
                let c = inverse(&mut planner, prod);
                if i != j {
                    // xc[j][i][k] = xc[i][j][-k]
                    xcorr[j][i] = (0..nfft).map(|t| c[(nfft - t) % nfft]).collect();
                }
                xcorr[i][j] = c;
            }
        }
        let all: Vec<usize> = (0..k).collect();
        let full = Cholesky::factor(gram(&xcorr, &all, filter_length, nfft), k * filter_length);
        Ok(Self {
            len,
            filter: filter_length,
            nfft,
            spectra,
            xcorr,
            full,
            planner,
        })
    }

    pub fn sources(&self) -> usize {
        self.spectra.len()
    }

    /// Project an estimate spectrum onto delays of the listed references.
    fn project(&mut self, est: &[Complex64], which: &[usize], chol: Option<&Cholesky>) -> Vec<f64> {
        let l = self.filter;
        let nfft = self.nfft;
        let chol = chol.unwrap_or(&self.full);
        let mut rhs = Vec::with_capacity(which.len() * l);
        for &j in which {
            let prod: Vec<Complex64> = self.spectra[j]
                .iter()
                .zip(est)
                .map(|(r, e)| r.conj() * e)
                .collect();
            rhs.extend_from_slice(&inverse(&mut self.planner, prod)[..l]);
        }
        let coef = chol.solve(&rhs);
        let mut acc = vec![Complex64::new(0.0, 0.0); nfft];
        for (b, &j) in which.iter().enumerate() {
            let c = forward(&mut self.planner, &coef[b * l..(b + 1) * l], nfft);
            for ((a, r), c) in acc.iter_mut().zip(&self.spectra[j]).zip(&c) {
                *a += r * c;
            }
        }
        let mut out = inverse(&mut self.planner, acc);
        out.truncate(self.len + l - 1);
        out
    }

    pub fn decompose(&mut self, estimate: &[f64], target: usize) -> Result<Decomposition> {
        let k = self.sources();
        if target >= k {
            return Err(MetricsError::BadTarget { index: target, count: k });
        }
        if estimate.len() != self.len {
            return Err(MetricsError::LengthMismatch(self.len, estimate.len()));
        }
        let est = forward(&mut self.planner, estimate, self.nfft);
        let single = Cholesky::factor(gram(&self.xcorr, &[target], self.filter, self.nfft), self.filter);
        let s_target = self.project(&est, &[target], Some(&single));
        let all: Vec<usize> = (0..k).collect();
        let p_all = self.project(&est, &all, None);
        let rank_deficient = self.full.deficient || single.deficient;

        let m = self.len + self.filter - 1;
        let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(a, s)| a - s).collect();
        let e_artif: Vec<f64> = (0..m)
            .map(|t| {
                let e = if t < self.len { estimate[t] } else { 0.0 };
                e - s_target[t] - e_interf[t]
            })
            .collect();
        Ok(Decomposition {
            s_target,
            e_interf,
            e_artif,
            rank_deficient,
        })
    }
}

fn forward(planner: &mut FftPlanner<f64>, x: &[f64], nfft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    planner.plan_fft_forward(nfft).process(&mut buf);
    buf
}

fn inverse(planner: &mut FftPlanner<f64>, mut buf: Vec<Complex64>) -> Vec<f64> {
    let n = buf.len();
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|z| z.re / n as f64).collect()
}

/// Block-Toeplitz Gram matrix of the delayed references in `which`.
fn gram(xcorr: &[Vec<Vec<f64>>], which: &[usize], l: usize, nfft: usize) -> Vec<f64> {
    let n = which.len() * l;
    let mut g = vec![0.0; n * n];
    for (bi, &i) in which.iter().enumerate() {
        for (bj, &j) in which.iter().enumerate() {
            let c = &xcorr[i][j];
            for t1 in 0..l {
                let row = (bi * l + t1) * n + bj * l;
                for t2 in 0..l {
                    // Σ_t r_i(t - t1) r_j(t - t2) = xc_ij[t1 - t2]
                    g[row + t2] = c[(t1 + nfft - t2) % nfft];
                }
            }
        }
    }
    g
}

/// One-shot decomposition of `estimate` against `references`.
pub fn decompose(
    references: &[&[f64]],
    estimate: &[f64],
    target: usize,
    filter_length: usize,
) -> Result<Decomposition> {
    Projector::new(references, filter_length)?.decompose(estimate, target)
}

/// Ratios in dB of the decomposition's energies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 log10(num / den)`; `+inf` for a vanishing denominator, `-inf` for a
/// vanishing numerator.
pub fn db_ratio(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        f64::NEG_INFINITY
    } else if den <= ZERO_RATIO * num {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

pub fn sdr_sir_sar(s_target: &[f64], e_interf: &[f64], e_artif: &[f64]) -> Result<Ratios> {
    if s_target.len() != e_interf.len() || s_target.len() != e_artif.len() {
        return Err(MetricsError::LengthMismatch(s_target.len(), e_artif.len()));
    }
    let st = energy(s_target);
    let ei = energy(e_interf);
    let noise: Vec<f64> = e_interf.iter().zip(e_artif).map(|(a, b)| a + b).collect();
    let resid = energy(&noise);
    if st == 0.0 && resid == 0.0 {
        return Err(MetricsError::Undefined);
    }
    let signal: Vec<f64> = s_target.iter().zip(e_interf).map(|(a, b)| a + b).collect();
    Ok(Ratios {
        sdr: db_ratio(st, resid),
        sir: db_ratio(st, ei),
        sar: db_ratio(energy(&signal), energy(e_artif)),
    })
}

impl Decomposition {
    pub fn ratios(&self) -> Result<Ratios> {
        sdr_sir_sar(&self.s_target, &self.e_interf, &self.e_artif)
    }
}

/// Mean, population standard deviation, and median of the finite values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub count: usize,
    /// Values excluded from the statistics because they were infinite.
    pub infinite: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let infinite = values.len() - finite.len();
        let count = finite.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                count,
                infinite,
            };
        }
        finite.sort_by(f64::total_cmp);
        let mean = finite.iter().sum::<f64>() / count as f64;
        let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        let median = if count % 2 == 1 {
            finite[count / 2]
        } else {
            0.5 * (finite[count / 2 - 1] + finite[count / 2])
        };
        Self {
            mean,
            std: var.sqrt(),
            median,
            count,
            infinite,
        }
    }
}
