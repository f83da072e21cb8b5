//! Matrix-vector latency harness: dense vs. masked (CSR) vs. factored.
//!
//! Timing loops are single-threaded and run one variant at a time. Each
//! variant is checked against the dense oracle before it is timed.

use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::{compressed_matrix, FactorPair};
use crate::prune::{iterative_prune, PruneConfig};
use crate::rng::stream_rng;
use crate::tensor::{DenseTensor, RetainMask};

/// Relative L2 agreement required between a variant and the dense oracle.
pub const AGREEMENT_TOLERANCE: f64 = 1e-4;

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent accumulators.
    let mut acc = [0.0f32; 8];
    let (ca, ra) = (a.chunks_exact(8), a.chunks_exact(8).remainder());
    let rb = b.chunks_exact(8).remainder();
    for (x, y) in ca.zip(b.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f32 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f32>() + tail
}

fn matvec_into(data: &[f32], rows: usize, cols: usize, x: &[f32], out: &mut [f32]) {
    for (o, row) in out.iter_mut().zip(data.chunks_exact(cols)).take(rows) {
        *o = dot(row, x);
    }
}

pub fn dense_matvec(w: &DenseTensor, x: &[f32]) -> Result<Vec<f32>> {
    let (m, n) = w.dims2()?;
    if x.len() != n {
        return Err(Error::Shape(format!(
            "{m}x{n} matrix times vector of {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; m];
    matvec_into(w.data(), m, n, x, &mut out);
    Ok(out)
}

/// `w1 * (w2 * x)`; the product `w1 w2` is never formed.
pub fn factored_matvec(f: &FactorPair, x: &[f32]) -> Result<Vec<f32>> {
    let (m, r) = f.w1.dims2()?;
    let (r2, n) = f.w2.dims2()?;
    if r != r2 || x.len() != n {
        return Err(Error::Shape(format!(
            "({m}x{r})({r2}x{n}) factors times vector of {}",
            x.len()
        )));
    }
    let mut tmp = vec![0.0; r];
    let mut out = vec![0.0; m];
    factored_into(f.w1.data(), f.w2.data(), m, r, n, x, &mut tmp, &mut out);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn factored_into(
    w1: &[f32],
    w2: &[f32],
    m: usize,
    r: usize,
    n: usize,
    x: &[f32],
    tmp: &mut [f32],
    out: &mut [f32],
) {
    matvec_into(w2, r, n, x, tmp);
    matvec_into(w1, m, r, tmp, out);
}

/// Compressed sparse row copy of the retained entries of a masked matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl CsrMatrix {
    pub fn from_masked(w: &DenseTensor, mask: &RetainMask) -> Result<Self> {
        let (rows, cols) = w.dims2()?;
        if mask.len() != w.numel() {
            return Err(Error::Shape(format!(
                "mask of {} bits for {rows}x{cols} matrix",
                mask.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (row, keep) in w
            .data()
            .chunks_exact(cols)
            .zip(mask.bits().chunks_exact(cols))
        {
            for (j, (&v, &k)) in row.iter().zip(keep).enumerate() {
                if k {
                    col_idx.push(j as u32);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} CSR times vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    fn matvec_into(&self, x: &[f32], out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            let span = self.row_ptr[i]..self.row_ptr[i + 1];
            *o = self.col_idx[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(&j, &v)| v * x[j as usize])
                .sum();
        }
    }
}

/// Product with the masked matrix, skipping pruned entries.
pub fn masked_matvec(w: &DenseTensor, mask: &RetainMask, x: &[f32]) -> Result<Vec<f32>> {
    CsrMatrix::from_masked(w, mask)?.matvec(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dense,
    Masked,
    Factored,
}

impl Variant {
    pub fn all() -> Vec<Variant> {
        vec![Variant::Dense, Variant::Masked, Variant::Factored]
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Variant::Dense),
            "masked" => Ok(Variant::Masked),
            "factored" => Ok(Variant::Factored),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Dense => "dense",
            Variant::Masked => "masked",
            Variant::Factored => "factored",
        })
    }
}

/// Analytic multiply-add count: `2mn`, `2 nnz` or `2r(m + n)`.
pub fn flops_model(variant: Variant, m: usize, n: usize, r: usize, nnz: usize) -> u64 {
    let ops = match variant {
        Variant::Dense => m * n,
        Variant::Masked => nnz,
        Variant::Factored => r * (m + n),
    };
    2 * ops as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: Variant,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub flops_model: u64,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub speedup_vs_dense: f64,
    /// Relative L2 difference from the dense oracle, measured before timing.
    pub max_rel_error: f64,
    /// One-off CSR construction time (masked variant only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setup_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// `(m, n, r)` triples.
    pub sizes: Vec<(usize, usize, usize)>,
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub warmup: usize,
    /// Fraction of weights pruned for the masked variant.
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![(2048, 2048, 128)],
            variants: Variant::all(),
            reps: 50,
            warmup: 5,
            sparsity: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Timing {
    median: u64,
    p10: u64,
    p90: u64,
}

fn percentile(sorted: &[u64], p: f64) -> u64 {
    let idx = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

fn time_it(reps: usize, warmup: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<u64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    Timing {
        median: percentile(&samples, 0.5),
        p10: percentile(&samples, 0.1),
        p90: percentile(&samples, 0.9),
    }
}

/// Relative L2 distance `||a - b|| / ||b||`.
pub fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    let den: f64 = b.iter().map(|&y| f64::from(y).powi(2)).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Reference product accumulated in `f64`.
fn oracle_matvec(w: &DenseTensor, x: &[f32]) -> Vec<f32> {
    let n = x.len();
    w.data()
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .zip(x)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>() as f32
        })
        .collect()
}

fn check_agreement(variant: Variant, got: &[f32], want: &[f32]) -> Result<f64> {
    let err = rel_l2(got, want);
    if err.is_nan() || err > AGREEMENT_TOLERANCE {
        return Err(Error::Mismatch {
            field: format!("{variant} matvec"),
            reported: format!("relative error {err:.3e}"),
            recomputed: format!("tolerance {AGREEMENT_TOLERANCE:.0e}"),
        });
    }
    Ok(err)
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f32) -> DenseTensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    DenseTensor::matrix(rows, cols, data).expect("positive dims")
}

/// Times every requested variant at every size. Dense is always measured,
/// since it is the speedup baseline, but only reported when requested.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    if cfg.reps < 30 {
        return Err(Error::InvalidArgument(format!(
            "reps must be >= 30, got {}",
            cfg.reps
        )));
    }
    if cfg.warmup < 5 {
        return Err(Error::InvalidArgument(format!(
            "warmup must be >= 5, got {}",
            cfg.warmup
        )));
    }
    let mut results = Vec::new();
    for (size_idx, &(m, n, r)) in cfg.sizes.iter().enumerate() {
        if m == 0 || n == 0 || r == 0 {
            return Err(Error::InvalidArgument(format!("bad size {m}x{n} r={r}")));
        }
        let mut rng = stream_rng(cfg.seed, size_idx as u64);
        let w = random_matrix(&mut rng, m, n, 1.0);
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let dense_want = oracle_matvec(&w, &x);
        let dense_err = check_agreement(Variant::Dense, &dense_matvec(&w, &x)?, &dense_want)?;
        let mut out = vec![0.0f32; m];
        let dense_t = time_it(cfg.reps, cfg.warmup, || {
            matvec_into(black_box(w.data()), m, n, black_box(&x), &mut out);
            black_box(&out);
        });

        for &variant in &cfg.variants {
            let (timing, flops, err, setup_ns) = match variant {
                Variant::Dense => (dense_t, flops_model(variant, m, n, r, 0), dense_err, None),
                Variant::Factored => {
                    let scale = 1.0 / (r as f32).sqrt();
                    let pair = FactorPair {
                        w1: random_matrix(&mut rng, m, r, scale),
                        w2: random_matrix(&mut rng, r, n, scale),
                        final_loss: f64::NAN,
                        loss_trace: Vec::new(),
                    };
                    let want = oracle_matvec(&compressed_matrix(&pair)?, &x);
                    let err = check_agreement(variant, &factored_matvec(&pair, &x)?, &want)?;
                    let mut tmp = vec![0.0f32; r];
                    let t = time_it(cfg.reps, cfg.warmup, || {
                        factored_into(
                            black_box(pair.w1.data()),
                            black_box(pair.w2.data()),
                            m,
                            r,
                            n,
                            black_box(&x),
                            &mut tmp,
                            &mut out,
                        );
                        black_box(&out);
                    });
                    (t, flops_model(variant, m, n, r, 0), err, None)
                }
                Variant::Masked => {
                    let prune = PruneConfig::new(cfg.sparsity, 1, 0.0, cfg.seed);
                    let mask = iterative_prune(&w, &prune)?.mask;
                    let start = Instant::now();
                    let csr = CsrMatrix::from_masked(&w, &mask)?;
                    let setup = start.elapsed().as_nanos() as u64;
                    let want = oracle_matvec(&mask.apply(&w)?, &x);
                    let err = check_agreement(variant, &csr.matvec(&x)?, &want)?;
                    let t = time_it(cfg.reps, cfg.warmup, || {
                        csr.matvec_into(black_box(&x), &mut out);
                        black_box(&out);
                    });
                    (
                        t,
                        flops_model(variant, m, n, r, csr.nnz()),
                        err,
                        Some(setup),
                    )
                }
            };
            results.push(BenchResult {
                variant,
                m,
                n,
                r,
                flops_model: flops,
                median_ns: timing.median,
                p10_ns: timing.p10,
                p90_ns: timing.p90,
                speedup_vs_dense: dense_t.median as f64 / timing.median.max(1) as f64,
                max_rel_error: err,
                setup_ns,
            });
        }
    }
    Ok(results)
}
