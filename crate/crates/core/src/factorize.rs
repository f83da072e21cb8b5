//! Annealed low-rank factorization `W ~= W1 * W2`.
//!
//! Minimizes `||W - W1 W2||_F^2` by gradient descent whose step size decays
//! geometrically (`eta_t = eta0 * decay^t`), the cooling schedule. A step that
//! would raise the loss is retried with a halved step, so accepted iterates
//! never go uphill.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{stream_rng, INIT_STREAM};
use crate::tensor::DenseTensor;

const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealConfig {
    pub rank: usize,
    /// Half-width of the uniform initialization; `None` means `1/sqrt(max(m, n))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    /// Initial step; `None` means `DEFAULT_ETA_SCALE / ||W||_F`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<f64>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_ETA_SCALE: f64 = 1.0;

fn default_decay() -> f64 {
    0.999
}

fn default_max_iters() -> usize {
    2000
}

fn default_rel_tol() -> f64 {
    1e-7
}

impl AnnealConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            init_scale: None,
            eta0: None,
            decay: default_decay(),
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("init_scale must be positive, got {s}"));
            }
        }
        if let Some(e) = self.eta0 {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("eta0 must be positive, got {e}"));
            }
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 {
            return bad(format!("rel_tol must be positive, got {}", self.rel_tol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    /// m x r
    pub w1: DenseTensor,
    /// r x n
    pub w2: DenseTensor,
    /// `||W - w1 w2||_F^2` of the returned (f32) factors.
    pub final_loss: f64,
    /// Loss at initialization followed by the loss of every accepted step.
    pub loss_trace: Vec<f64>,
}

impl FactorPair {
    pub fn rank(&self) -> usize {
        self.w2.shape()[0]
    }

    /// Stored parameters: `r * (m + n)`.
    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.w2.numel()
    }

    pub fn push_into(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        archive.push(format!("{prefix}.w1"), self.w1.clone())?;
        archive.push(format!("{prefix}.w2"), self.w2.clone())?;
        Ok(())
    }

    /// Rebuilds the factors from an archive; loss fields are left empty.
    pub fn from_archive(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let fetch = |suffix: &str| {
            archive
                .get(&format!("{prefix}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("archive lacks {prefix}.{suffix}")))
        };
        let (w1, w2) = (fetch("w1")?, fetch("w2")?);
        let (_, r1) = w1.dims2()?;
        let (r2, _) = w2.dims2()?;
        if r1 != r2 {
            return Err(Error::Shape(format!(
                "{prefix}: inner dimensions {r1} vs {r2}"
            )));
        }
        Ok(Self {
            w1,
            w2,
            final_loss: f64::NAN,
            loss_trace: Vec::new(),
        })
    }
}

fn conformable(w: &DenseTensor, w1: &DenseTensor, w2: &DenseTensor) -> Result<(Mat, Mat, Mat)> {
    let (m, n) = w.dims2()?;
    let (m1, r1) = w1.dims2()?;
    let (r2, n2) = w2.dims2()?;
    if m1 != m || n2 != n || r1 != r2 {
        return Err(Error::Shape(format!(
            "W {m}x{n} vs W1 {m1}x{r1} * W2 {r2}x{n2}"
        )));
    }
    Ok((
        Mat::from_tensor(w)?,
        Mat::from_tensor(w1)?,
        Mat::from_tensor(w2)?,
    ))
}

/// `||W - W1 W2||_F^2`, accumulated in `f64`.
pub fn frobenius_loss(w: &DenseTensor, w1: &DenseTensor, w2: &DenseTensor) -> Result<f64> {
    let (w, w1, w2) = conformable(w, w1, w2)?;
    Ok(w1.matmul(&w2)?.sub(&w)?.frobenius_sq())
}

/// Analytic gradients `(2 (W1 W2 - W) W2^T, 2 W1^T (W1 W2 - W))`.
pub fn loss_gradient(
    w: &DenseTensor,
    w1: &DenseTensor,
    w2: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    let (w, w1, w2) = conformable(w, w1, w2)?;
    let residual = w1.matmul(&w2)?.sub(&w)?;
    let (g1, g2) = gradients(&residual, &w1, &w2)?;
    Ok((g1.to_tensor(), g2.to_tensor()))
}

fn gradients(residual: &Mat, w1: &Mat, w2: &Mat) -> Result<(Mat, Mat)> {
    let mut g1 = residual.matmul_t(w2)?;
    g1.scale(2.0);
    let mut g2 = w1.t_matmul(residual)?;
    g2.scale(2.0);
    Ok((g1, g2))
}

/// `w1 * w2`, the compressed replacement for the original matrix.
pub fn compressed_matrix(f: &FactorPair) -> Result<DenseTensor> {
    Ok(Mat::from_tensor(&f.w1)?
        .matmul(&Mat::from_tensor(&f.w2)?)?
        .to_tensor())
}

/// Seeded annealed factorization of a matrix at `cfg.rank`.
///
/// Factors are drawn uniformly from `[-init_scale, init_scale]`, `W1` first,
/// from ChaCha stream [`INIT_STREAM`] of `cfg.seed`. Iteration stops when
/// the relative improvement of an accepted step drops below `rel_tol`, when
/// no step survives `MAX_HALVINGS` halvings, or after `max_iters` steps.
pub fn anneal_factorize(w: &DenseTensor, cfg: &AnnealConfig) -> Result<FactorPair> {
    cfg.validate()?;
    let (m, n) = w.dims2()?;
    if cfg.rank > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {} exceeds min({m}, {n})",
            cfg.rank
        )));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("matrix passed to anneal_factorize"));
    }
    let r = cfg.rank;
    let target = Mat::from_tensor(w)?;
    let norm = target.frobenius_sq().sqrt();

    let scale = cfg.init_scale.unwrap_or(1.0 / (m.max(n) as f64).sqrt());
    let mut rng = stream_rng(cfg.seed, INIT_STREAM);
    let mut draw = |rows, cols| {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-scale..=scale))
                .collect(),
        )
    };
    let mut w1 = draw(m, r);
    let mut w2 = draw(r, n);
    let eta0 = cfg.eta0.unwrap_or(if norm > 0.0 {
        DEFAULT_ETA_SCALE / norm
    } else {
        DEFAULT_ETA_SCALE
    });

    let mut residual = w1.matmul(&w2)?.sub(&target)?;
    let mut loss = residual.frobenius_sq();
    if !loss.is_finite() {
        return Err(Error::Diverged { iteration: 0, loss });
    }
    let mut loss_trace = vec![loss];
    let mut eta_t = eta0;

    for iteration in 1..=cfg.max_iters {
        if loss == 0.0 {
            break;
        }
        let (g1, g2) = gradients(&residual, &w1, &w2)?;
        let mut step = eta_t;
        let mut accepted = None;
        let mut last_trial = loss;
        for _ in 0..=MAX_HALVINGS {
            let mut c1 = w1.clone();
            c1.axpy(-step, &g1)?;
            let mut c2 = w2.clone();
            c2.axpy(-step, &g2)?;
            let c_res = c1.matmul(&c2)?.sub(&target)?;
            let c_loss = c_res.frobenius_sq();
            last_trial = c_loss;
            if c_loss <= loss {
                accepted = Some((c1, c2, c_res, c_loss));
                break;
            }
            step *= 0.5;
        }
        let Some((c1, c2, c_res, c_loss)) = accepted else {
            if !last_trial.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    loss: last_trial,
                });
            }
            break;
        };
        let improvement = (loss - c_loss) / loss;
        w1 = c1;
        w2 = c2;
        residual = c_res;
        loss = c_loss;
        loss_trace.push(loss);
        if improvement < cfg.rel_tol {
            break;
        }
        eta_t *= cfg.decay;
    }

    let w1 = w1.to_tensor();
    let w2 = w2.to_tensor();
    let final_loss = frobenius_loss(w, &w1, &w2)?;
    Ok(FactorPair {
        w1,
        w2,
        final_loss,
        loss_trace,
    })
}
